#![allow(dead_code)]

pub mod oracles;

use planlm::actions::{assign_rows, kmeans_fit, ActionId, ActionSet, KMeansConfig};
use planlm::corpus::{build_vocabulary, tokenize, ProcessedArticle, Vocabulary};
use planlm::encoder::{embed_corpus, ArticleEmbeddings, Encoder, EncoderConfig};
use planlm::generation::Generator;
use planlm::lm::{AdapterConfig, LanguageModel, LmConfig, LmDocument};
use planlm::synthdata::{generate_corpus, TemplateGrammar};

pub struct Fixture {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub set: ActionSet<f32>,
    pub processed: Vec<ProcessedArticle>,
    pub docs: Vec<LmDocument>,
    pub model: LanguageModel<f32>,
}

impl Fixture {
    pub fn generator(&self) -> Generator<'_> {
        Generator { model: &self.model, encoder: &self.encoder, actions: &self.set, vocab: &self.vocab }
    }
}

/// Small synthetic corpus with `k` actions and an untrained adapter model.
pub fn fixture(articles: usize, k: usize, context: usize) -> Fixture {
    let grammar = TemplateGrammar::biography(0.9, 3).unwrap();
    let corpus = generate_corpus(&grammar, articles, 6).unwrap();
    let vocab = build_vocabulary(&corpus.articles, 1000).unwrap();
    let processed: Vec<_> = corpus.articles.iter().map(|a| tokenize(a, &vocab)).collect();
    let encoder = Encoder::new(EncoderConfig { dim: 16, ..Default::default() }).unwrap();
    let (m, _) = embed_corpus(&processed, &encoder);
    let set = kmeans_fit(&m, &KMeansConfig { k, seed: 0, max_iters: 50, restarts: 1 }).unwrap();
    let flat = assign_rows(&m, &set);
    let embs = ArticleEmbeddings::compute(&processed, &encoder);
    let mut off = 0;
    let docs = processed
        .iter()
        .map(|a| {
            let n = a.sentences.len();
            off += n;
            let oracle: Vec<ActionId> = flat[off - n..off].to_vec();
            LmDocument::new(a, oracle, embs.get(&a.id).cloned()).unwrap()
        })
        .collect();
    let cfg = LmConfig { d_model: 16, n_layers: 2, n_heads: 2, context, seed: 5, ..LmConfig::new(vocab.len()) };
    let mut model = LanguageModel::new(cfg).unwrap();
    model.attach_adapter(AdapterConfig::new(k, 16, 2), Some(&set.centroids)).unwrap();
    Fixture { vocab, encoder, set, processed, docs, model }
}
