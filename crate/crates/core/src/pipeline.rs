//! End-to-end pipeline over an output directory. Each stage reads its
//! inputs by path, writes its artifacts plus a JSON manifest, and refuses to
//! consume artifacts produced under a different config digest unless forced.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::actions::{assign_rows, inspect_cluster, kmeans_fit, load_sequences, save_sequences, ActionId, ActionSequence, ActionSet, ClusterReport, KMeansConfig};
use crate::config::{hex_sha256, RunConfig, Stage};
use crate::corpus::{build_vocabulary, load_articles, read_jsonl, split_corpus, tokenize, write_jsonl, Article, ProcessedArticle, Vocabulary};
use crate::encoder::{embed_corpus, ArticleEmbeddings, EmbeddingIndex, Encoder, EncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_generations, hmm_fit, noise_scan, oracle_scan, regime_perplexity, write_curve_csv, EvalReport, HmmCritic, NoiseScan, OracleScan, RegimeReport};
use crate::generation::{write_generations, GenerationConfig, GenerationMode, GenerationRecord, Generator, Planning};
use crate::lm::{finetune_adapter, finetune_insert, pretrain_base, AdapterConfig, LanguageModel, LmConfig, LmDocument, LmTrainConfig, Locus, Regime, RegimeSpec, Style};
use crate::matrix::Matrix;
use crate::planner::{evaluate_planner, train_planner, Planner, PlannerArticle, PlannerConfig, PlannerTrainConfig};
use crate::synthdata::{generate_corpus, TemplateGrammar};

pub const CORPUS: &str = "corpus.jsonl";
pub const LABELS: &str = "labels.txt";
pub const VOCAB: &str = "vocab.txt";
pub const SPLITS: &str = "splits.json";
pub const EMBEDDINGS: &str = "embeddings.plmb";
pub const EMBEDDING_INDEX: &str = "embeddings.idx";
pub const CENTROIDS: &str = "centroids.plmb";
pub const KMEANS_REPORT: &str = "kmeans.json";
pub const ACTIONS: &str = "actions.txt";
pub const PLANNER: &str = "planner.plmc";
pub const PLANNER_REPORT: &str = "planner.json";
pub const BASE_LM: &str = "lm_base.plmc";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ORACLE_CURVE: &str = "oracle_curve.csv";
pub const NOISE_CURVE: &str = "noise_curve.csv";
pub const SCAN_REPORT: &str = "scan.json";
pub const SWEEP: &str = "sweep_k.csv";

/// Article ids of each split, in split order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    pub config: String,
    pub seed: u64,
    /// Artifact name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

/// File name tag of a finetuned model.
pub fn model_tag(spec: &RegimeSpec) -> String {
    match spec.style {
        Style::Adapter => spec.regime.name().to_string(),
        Style::Insert => match spec.locus {
            Locus::External => "insert_external".into(),
            Locus::Internal => "insert_internal".into(),
        },
    }
}

pub fn model_file(spec: &RegimeSpec) -> String {
    format!("lm_{}.plmc", model_tag(spec))
}

pub fn generations_file(spec: &RegimeSpec) -> String {
    format!("generations_{}.jsonl", model_tag(spec))
}

/// Digest scope of the stage that writes manifest `stage`.
fn stage_of(stage: &str) -> Stage {
    match stage {
        "ingest" => Stage::Ingest,
        "embed" => Stage::Embed,
        "cluster" | "actions" => Stage::Cluster,
        "train-planner" => Stage::Planner,
        "pretrain-lm" => Stage::Pretrain,
        s if s.starts_with("finetune") => Stage::Finetune,
        _ => Stage::Report,
    }
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex_sha256(&std::fs::read(path)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Corpus, vocabulary, encoder and embeddings loaded together.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub articles: Vec<ProcessedArticle>,
    pub splits: Splits,
    pub embeddings: ArticleEmbeddings,
    /// Every sentence embedding in corpus order.
    pub matrix: Matrix<f32>,
}

impl Prepared {
    fn by_id(&self) -> HashMap<&str, &ProcessedArticle> {
        self.articles.iter().map(|a| (a.id.as_str(), a)).collect()
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            _ => Err(invalid(format!("unknown split {name:?}"))),
        }
    }

    /// Embeddings of every training sentence, the k-means input.
    pub fn train_matrix(&self) -> Result<Matrix<f32>> {
        let mut rows: Vec<&[f32]> = Vec::new();
        for id in &self.splits.train {
            let m = self.embeddings.get(id).ok_or_else(|| invalid(format!("no embeddings for {id}")))?;
            rows.extend(m.iter_rows());
        }
        Matrix::from_rows(&rows)
    }

    /// Nearest-centroid action sequence of every article.
    pub fn sequences(&self, set: &ActionSet<f32>) -> Vec<ActionSequence> {
        self.articles
            .iter()
            .map(|a| ActionSequence {
                article_id: a.id.clone(),
                actions: self.embeddings.get(&a.id).map(|m| assign_rows(m, set)).unwrap_or_default(),
            })
            .collect()
    }

    pub fn documents(&self, ids: &[String], sequences: &[ActionSequence]) -> Result<Vec<LmDocument>> {
        let arts = self.by_id();
        let seqs: HashMap<&str, &ActionSequence> = sequences.iter().map(|s| (s.article_id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                let a = arts.get(id.as_str()).ok_or_else(|| invalid(format!("unknown article {id}")))?;
                let s = seqs.get(id.as_str()).ok_or_else(|| invalid(format!("no action sequence for {id}")))?;
                LmDocument::new(a, s.actions.clone(), self.embeddings.get(id).cloned())
            })
            .collect()
    }

    pub fn planner_articles(&self, ids: &[String], sequences: &[ActionSequence]) -> Result<Vec<PlannerArticle>> {
        let seqs: HashMap<&str, &ActionSequence> = sequences.iter().map(|s| (s.article_id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                let s = seqs.get(id.as_str()).ok_or_else(|| invalid(format!("no action sequence for {id}")))?;
                let e = self.embeddings.get(id).ok_or_else(|| invalid(format!("no embeddings for {id}")))?;
                PlannerArticle::new(id.clone(), e.clone(), s.actions.clone())
            })
            .collect()
    }
}

/// Documents for unconditioned training; every sentence carries the
/// placeholder action 0.
fn unlabeled_documents(articles: &[ProcessedArticle], ids: &[String]) -> Result<Vec<LmDocument>> {
    let arts: HashMap<&str, &ProcessedArticle> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
    ids.iter()
        .map(|id| {
            let a = arts.get(id.as_str()).ok_or_else(|| invalid(format!("unknown article {id}")))?;
            LmDocument::new(a, vec![0; a.sentences.len()], None)
        })
        .collect()
}

/// Model and training settings derived from a config.
impl RunConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { dim: self.embed_dim, ngram_order: self.ngram_order, hash_buckets: self.hash_buckets, projection_seed: self.stage_seed("encoder") }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig { k: self.k, seed: self.stage_seed("kmeans"), max_iters: self.kmeans_max_iters, restarts: self.kmeans_restarts }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            n_layers: self.planner_layers,
            n_heads: self.planner_heads,
            max_context: self.planner_max_context,
            variant: self.planner_variant,
            head_init: self.planner_head_init,
            seed: self.stage_seed("planner"),
            ..PlannerConfig::new(self.embed_dim, self.k)
        }
    }

    pub fn planner_train_config(&self) -> PlannerTrainConfig {
        PlannerTrainConfig {
            batch_size: self.planner_batch,
            learning_rate: self.planner_lr,
            max_epochs: self.planner_epochs,
            patience: self.patience,
            seed: self.stage_seed("planner-train"),
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig { d_model: self.lm_dim, n_layers: self.lm_layers, n_heads: self.lm_heads, context: self.context, seed: self.stage_seed("lm"), ..LmConfig::new(vocab_size) }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            layers: self.adapter_layer_count(),
            init: self.adapter_init,
            seed: self.stage_seed("adapter"),
            ..AdapterConfig::new(self.k, self.embed_dim, self.lm_layers)
        }
    }

    pub fn pretrain_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            batch_size: self.lm_batch,
            learning_rate: self.pretrain_lr,
            max_epochs: self.pretrain_epochs,
            patience: self.patience,
            seed: self.stage_seed("pretrain"),
            ..Default::default()
        }
    }

    pub fn finetune_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            batch_size: self.lm_batch,
            learning_rate: self.finetune_lr,
            max_epochs: self.finetune_epochs,
            patience: self.patience,
            seed: self.stage_seed("finetune"),
            ..Default::default()
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            max_tokens: self.lengths.iter().copied().max().unwrap_or(128),
            temperature: self.gen_temperature,
            top_k: self.gen_top_k,
            seed: self.stage_seed("generate"),
            mode: GenerationMode::Conditional,
        }
    }

    pub fn regime_spec(&self) -> RegimeSpec {
        RegimeSpec { regime: self.regime, style: self.style, locus: self.locus }
    }
}

/// Finetunes a copy of `base` under `spec`.
pub fn finetune_model(
    config: &RunConfig,
    base: &LanguageModel<f32>,
    spec: RegimeSpec,
    set: &ActionSet<f32>,
    train: &[LmDocument],
    val: &[LmDocument],
    planner: Option<&Planner<f32>>,
) -> Result<LanguageModel<f32>> {
    spec.validate()?;
    let mut model = base.clone();
    match spec.style {
        Style::Adapter => {
            if spec.regime != Regime::None {
                model.attach_adapter(config.adapter_config(), Some(&set.centroids))?;
            }
            finetune_adapter(&mut model, spec.regime, train, val, planner, &config.finetune_config())?;
        }
        Style::Insert => {
            model = model.extend_vocab(set.k(), config.stage_seed("extend-vocab"))?;
            finetune_insert(&mut model, spec.locus, train, val, planner, &config.finetune_config())?;
        }
    }
    Ok(model)
}

fn needs_planner(spec: &RegimeSpec) -> bool {
    match spec.style {
        Style::Adapter => spec.regime.needs_planner() || spec.regime == Regime::Oracle,
        Style::Insert => spec.locus == Locus::External,
    }
}

/// Needs the planner during finetuning.
fn trains_with_planner(spec: &RegimeSpec) -> bool {
    match spec.style {
        Style::Adapter => spec.regime.needs_planner(),
        Style::Insert => spec.locus == Locus::External,
    }
}

/// One row of the cluster-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub ppl: f64,
    pub accuracy: f64,
    pub average_rank: f64,
}

/// Output directory plus the config that governs it.
pub struct Workspace {
    pub dir: PathBuf,
    pub config: RunConfig,
    /// Accept artifacts produced under another config digest.
    pub force: bool,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        config.validate()?;
        Ok(Self { dir, config, force: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("{stage}.manifest.json"))
    }

    /// Path of an upstream artifact, checked for existence and digest.
    pub fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, producer });
        }
        let mp = self.manifest_path(&producer.replace(' ', "_"));
        if !mp.exists() {
            return Err(Error::MissingArtifact { path: mp, producer });
        }
        let m: Manifest = read_json(&mp)?;
        let expected = self.config.stage_digest(stage_of(producer));
        if m.config_digest != expected && !self.force {
            return Err(Error::DigestMismatch { path: p, expected, found: m.config_digest });
        }
        Ok(p)
    }

    fn finish(&self, stage: &str, inputs: &[&str], outputs: &[String], started: Instant) -> Result<()> {
        let hashes = |names: &mut dyn Iterator<Item = &str>| -> Result<BTreeMap<String, String>> {
            names.map(|n| Ok((n.to_string(), file_sha(&self.path(n))?))).collect()
        };
        let m = Manifest {
            stage: stage.to_string(),
            config_digest: self.config.stage_digest(stage_of(stage)),
            config: self.config.to_text(),
            seed: self.config.seed,
            inputs: hashes(&mut inputs.iter().copied())?,
            outputs: hashes(&mut outputs.iter().map(String::as_str))?,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        write_json(&self.manifest_path(&stage.replace(' ', "_")), &m)
    }

    /// Loads (or generates) the corpus, splits it, and builds the
    /// vocabulary from the training split.
    pub fn ingest(&self) -> Result<()> {
        let t = Instant::now();
        let c = &self.config;
        let mut outputs = vec![CORPUS.to_string(), VOCAB.to_string(), SPLITS.to_string()];
        let articles: Vec<Article> = if c.corpus_path.is_empty() {
            let grammar = TemplateGrammar::biography(c.synth_cycle_prob, c.stage_seed("synth"))?;
            let corpus = generate_corpus(&grammar, c.synth_articles, c.synth_sentences)?;
            corpus.write(&self.path(CORPUS), &self.path(LABELS))?;
            outputs.push(LABELS.to_string());
            corpus.articles
        } else {
            let path = Path::new(&c.corpus_path);
            if !path.exists() {
                return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "ingest (corpus_path)" });
            }
            let articles = load_articles(path)?;
            let mut w = BufWriter::new(File::create(self.path(CORPUS))?);
            write_jsonl(&articles, &mut w)?;
            w.flush()?;
            articles
        };
        let mut seen = std::collections::HashSet::new();
        for a in &articles {
            if a.text.trim().is_empty() {
                return Err(invalid(format!("article {} has empty text", a.id)));
            }
            if !seen.insert(a.id.as_str()) {
                return Err(invalid(format!("duplicate article id {}", a.id)));
            }
        }
        let (train, val, test) = split_corpus(&articles, c.stage_seed("split"), c.n_val, c.n_test)?;
        build_vocabulary(&train, c.vocab_size)?.save(&self.path(VOCAB))?;
        let ids = |v: &[Article]| v.iter().map(|a| a.id.clone()).collect();
        write_json(&self.path(SPLITS), &Splits { train: ids(&train), val: ids(&val), test: ids(&test) })?;
        self.finish("ingest", &[], &outputs, t)
    }

    fn load_text(&self) -> Result<(Vocabulary, Vec<ProcessedArticle>, Splits)> {
        let corpus = read_jsonl(BufReader::new(File::open(self.require(CORPUS, "ingest")?)?))?;
        let vocab = Vocabulary::load(&self.require(VOCAB, "ingest")?)?;
        let splits: Splits = read_json(&self.require(SPLITS, "ingest")?)?;
        let processed = corpus.iter().map(|a| tokenize(a, &vocab)).collect();
        Ok((vocab, processed, splits))
    }

    pub fn embed(&self) -> Result<()> {
        let t = Instant::now();
        let (_, processed, _) = self.load_text()?;
        let encoder = Encoder::new(self.config.encoder_config())?;
        let (m, index) = embed_corpus(&processed, &encoder);
        m.save(&self.path(EMBEDDINGS))?;
        index.save(&self.path(EMBEDDING_INDEX))?;
        self.finish("embed", &[CORPUS, VOCAB], &[EMBEDDINGS.into(), EMBEDDING_INDEX.into()], t)
    }

    pub fn prepared(&self) -> Result<Prepared> {
        let (vocab, articles, splits) = self.load_text()?;
        let matrix = Matrix::load(&self.require(EMBEDDINGS, "embed")?)?;
        let index = EmbeddingIndex::load(&self.require(EMBEDDING_INDEX, "embed")?)?;
        let embeddings = ArticleEmbeddings::from_matrix(&matrix, &index)?;
        let encoder = Encoder::new(self.config.encoder_config())?;
        Ok(Prepared { vocab, encoder, articles, splits, embeddings, matrix })
    }

    /// k-means over the training sentences.
    pub fn cluster(&self) -> Result<()> {
        let t = Instant::now();
        let p = self.prepared()?;
        let set = kmeans_fit(&p.train_matrix()?, &self.config.kmeans_config())?;
        set.centroids.save(&self.path(CENTROIDS))?;
        write_json(
            &self.path(KMEANS_REPORT),
            &json!({ "k": set.k(), "inertia": set.inertia, "iterations": set.iterations, "inertia_trace": set.inertia_trace }),
        )?;
        self.finish("cluster", &[EMBEDDINGS], &[CENTROIDS.into(), KMEANS_REPORT.into()], t)
    }

    pub fn action_set(&self) -> Result<ActionSet<f32>> {
        Ok(ActionSet::from_centroids(Matrix::load(&self.require(CENTROIDS, "cluster")?)?))
    }

    pub fn actions(&self) -> Result<()> {
        let t = Instant::now();
        let p = self.prepared()?;
        save_sequences(&p.sequences(&self.action_set()?), &self.path(ACTIONS))?;
        self.finish("actions", &[EMBEDDINGS, CENTROIDS], &[ACTIONS.into()], t)
    }

    pub fn sequences(&self) -> Result<Vec<ActionSequence>> {
        load_sequences(&self.require(ACTIONS, "actions")?)
    }

    pub fn train_planner(&self) -> Result<()> {
        let t = Instant::now();
        let p = self.prepared()?;
        let set = self.action_set()?;
        let seqs = self.sequences()?;
        let train = p.planner_articles(&p.splits.train, &seqs)?;
        let val = p.planner_articles(&p.splits.val, &seqs)?;
        let mut planner = Planner::<f32>::new(self.config.planner_config(), Some(&set.centroids))?;
        let report = train_planner(&mut planner, &train, &val, &self.config.planner_train_config())?;
        let metrics = evaluate_planner(&planner, &val)?;
        self.save_checkpoint(planner.to_checkpoint(), PLANNER, Stage::Planner)?;
        write_json(&self.path(PLANNER_REPORT), &json!({ "train": report, "val": metrics }))?;
        self.finish("train-planner", &[EMBEDDINGS, ACTIONS], &[PLANNER.into(), PLANNER_REPORT.into()], t)
    }

    fn save_checkpoint(&self, mut ck: crate::autodiff::Checkpoint, name: &str, stage: Stage) -> Result<()> {
        if let Some(serde_json::Value::Object(m)) = ck.meta.as_mut() {
            m.insert("config_digest".into(), json!(self.config.stage_digest(stage)));
        }
        ck.save(&self.path(name))
    }

    pub fn planner(&self) -> Result<Planner<f32>> {
        Planner::load(&self.require(PLANNER, "train-planner")?)
    }

    pub fn pretrain_lm(&self) -> Result<()> {
        let t = Instant::now();
        let (vocab, articles, splits) = self.load_text()?;
        let train = unlabeled_documents(&articles, &splits.train)?;
        let val = unlabeled_documents(&articles, &splits.val)?;
        let mut model = LanguageModel::<f32>::new(self.config.lm_config(vocab.len()))?;
        let report = pretrain_base(&mut model, &train, &val, &self.config.pretrain_config())?;
        self.save_checkpoint(model.to_checkpoint(), BASE_LM, Stage::Pretrain)?;
        write_json(&self.path("pretrain.json"), &report)?;
        self.finish("pretrain-lm", &[CORPUS, VOCAB], &[BASE_LM.into(), "pretrain.json".into()], t)
    }

    /// Finetunes the base model under the configured regime.
    pub fn finetune(&self) -> Result<()> {
        let t = Instant::now();
        let spec = self.config.regime_spec();
        let p = self.prepared()?;
        let set = self.action_set()?;
        let seqs = self.sequences()?;
        let base = LanguageModel::<f32>::load(&self.require(BASE_LM, "pretrain-lm")?)?;
        let planner = if trains_with_planner(&spec) { Some(self.planner()?) } else { None };
        let train = p.documents(&p.splits.train, &seqs)?;
        let val = p.documents(&p.splits.val, &seqs)?;
        let model = finetune_model(&self.config, &base, spec, &set, &train, &val, planner.as_ref())?;
        let name = model_file(&spec);
        self.save_checkpoint(model.to_checkpoint(), &name, Stage::Finetune)?;
        let mut inputs = vec![BASE_LM, CENTROIDS, ACTIONS];
        if planner.is_some() {
            inputs.push(PLANNER);
        }
        self.finish(&format!("finetune_{}", model_tag(&spec)), &inputs, &[name], t)
    }

    fn finetuned(&self, spec: &RegimeSpec) -> Result<LanguageModel<f32>> {
        let name = model_file(spec);
        let p = self.path(&name);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, producer: "finetune" });
        }
        let m: Manifest = read_json(&self.manifest_path(&format!("finetune_{}", model_tag(spec))))
            .map_err(|_| Error::MissingArtifact { path: p.clone(), producer: "finetune" })?;
        let expected = self.config.stage_digest(Stage::Finetune);
        if m.config_digest != expected && !self.force {
            return Err(Error::DigestMismatch { path: p, expected, found: m.config_digest });
        }
        LanguageModel::load(&p)
    }

    fn eval_documents(&self, p: &Prepared, limit: usize) -> Result<Vec<LmDocument>> {
        let ids = p.split(&self.config.eval_split)?;
        let ids = if limit == 0 { ids } else { &ids[..limit.min(ids.len())] };
        p.documents(ids, &self.sequences()?)
    }

    fn critic(&self, p: &Prepared, seqs: &[ActionSequence]) -> Result<HmmCritic<f64>> {
        let train: std::collections::HashSet<&str> = p.splits.train.iter().map(String::as_str).collect();
        let data: Vec<Vec<ActionId>> = seqs.iter().filter(|s| train.contains(s.article_id.as_str())).map(|s| s.actions.clone()).collect();
        Ok(hmm_fit(&data, self.config.critic_states, self.config.k, self.config.stage_seed("critic"), self.config.critic_iters)?.0)
    }

    /// Conditional generations for the evaluation split.
    pub fn generate(&self) -> Result<Vec<GenerationRecord>> {
        let t = Instant::now();
        let spec = self.config.regime_spec();
        let p = self.prepared()?;
        let set = self.action_set()?;
        let model = self.finetuned(&spec)?;
        let planner = if needs_planner(&spec) { Some(self.planner()?) } else { None };
        let g = Generator { model: &model, encoder: &p.encoder, actions: &set, vocab: &p.vocab };
        let planning = Planning::for_model(&model, planner.as_ref())?;
        let docs = self.eval_documents(&p, self.config.eval_articles)?;
        let (_, records) = evaluate_generations(&g, &planning, &docs, &self.config.lengths, &self.config.generation_config(), None)?;
        let name = generations_file(&spec);
        let mut w = BufWriter::new(File::create(self.path(&name))?);
        write_generations(&records, &mut w)?;
        w.flush()?;
        self.finish(&format!("generate_{}", model_tag(&spec)), &[CENTROIDS], &[name], t)?;
        Ok(records)
    }

    /// Scores the configured regime and merges it into the eval report.
    /// Regimes that do not plan never load or call the planner.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let t = Instant::now();
        let spec = self.config.regime_spec();
        let p = self.prepared()?;
        let set = self.action_set()?;
        let seqs = self.sequences()?;
        let model = self.finetuned(&spec)?;
        let planner = if needs_planner(&spec) { Some(self.planner()?) } else { None };
        let g = Generator { model: &model, encoder: &p.encoder, actions: &set, vocab: &p.vocab };
        let all_docs = self.eval_documents(&p, 0)?;
        let ppl = regime_perplexity(&g, &all_docs, planner.as_ref())?;
        let critic = self.critic(&p, &seqs)?;
        let planning = Planning::for_model(&model, planner.as_ref())?;
        let gen_docs = self.eval_documents(&p, self.config.eval_articles)?;
        let (generation, _) = evaluate_generations(&g, &planning, &gen_docs, &self.config.lengths, &self.config.generation_config(), Some(&critic))?;

        let digest = self.config.digest();
        let report_path = self.path(EVAL_REPORT);
        let previous = if report_path.exists() { Some(read_json::<EvalReport>(&report_path)?) } else { None };
        let mut report = match previous {
            Some(r) if r.config_digest == digest => r,
            Some(r) if !self.force => {
                return Err(Error::DigestMismatch { path: report_path, expected: digest, found: r.config_digest });
            }
            _ => EvalReport {
                config_digest: digest,
                seeds: vec![self.config.seed],
                lengths: self.config.lengths.clone(),
                regimes: BTreeMap::new(),
                planner: None,
                ground_truth_latent_ppl: None,
            },
        };
        if let Some(pl) = planner.as_ref() {
            report.planner = Some(evaluate_planner(pl, &p.planner_articles(p.split(&self.config.eval_split)?, &seqs)?)?);
        }
        let truth: Vec<f64> = all_docs.iter().filter_map(|d| critic.latent_perplexity(&d.oracle).ok().flatten()).collect();
        report.ground_truth_latent_ppl = (!truth.is_empty()).then(|| truth.iter().sum::<f64>() / truth.len() as f64);
        report.regimes.insert(model_tag(&spec), RegimeReport { ppl, generation });
        if !report.is_finite() {
            return Err(invalid("evaluation produced a non-finite value"));
        }
        let mut w = BufWriter::new(File::create(&report_path)?);
        w.write_all(report.to_pretty_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        self.finish("evaluate", &[CENTROIDS, ACTIONS], &[EVAL_REPORT.into()], t)?;
        Ok(report)
    }

    /// Per-step action ranking of the ORACLE adapter model, plus the
    /// Gaussian-noise control.
    pub fn scan_oracle(&self) -> Result<(OracleScan, NoiseScan)> {
        let t = Instant::now();
        let p = self.prepared()?;
        let model = self.finetuned(&RegimeSpec::adapter(Regime::Oracle))?;
        let docs = self.eval_documents(&p, self.config.scan_articles)?;
        let scan = oracle_scan(&model, &docs)?;
        let noise = noise_scan(&model, &docs, self.config.stage_seed("noise-scan"), None)?;
        for (name, curve) in [(ORACLE_CURVE, &scan.curve), (NOISE_CURVE, &noise.curve)] {
            let mut w = BufWriter::new(File::create(self.path(name))?);
            write_curve_csv(curve, &mut w)?;
            w.flush()?;
        }
        write_json(&self.path(SCAN_REPORT), &json!({ "oracle": scan, "noise": noise }))?;
        self.finish("scan-oracle", &["lm_oracle.plmc"], &[ORACLE_CURVE.into(), NOISE_CURVE.into(), SCAN_REPORT.into()], t)?;
        Ok((scan, noise))
    }

    pub fn inspect_cluster(&self, action: ActionId, top_n: usize) -> Result<ClusterReport> {
        let p = self.prepared()?;
        inspect_cluster(action, &p.articles, &p.matrix, &self.action_set()?, top_n)
    }

    /// Re-clusters at every `k` of the sweep, trains a planner and a
    /// PREDICTED_PA adapter on the shared base model, and tabulates the
    /// evaluation-split PPL and planner metrics.
    pub fn sweep_k(&self) -> Result<Vec<SweepRow>> {
        let t = Instant::now();
        let p = self.prepared()?;
        let base = LanguageModel::<f32>::load(&self.require(BASE_LM, "pretrain-lm")?)?;
        let train_m = p.train_matrix()?;
        let mut rows = Vec::new();
        for &k in &self.config.sweep_ks {
            let mut cfg = self.config.clone();
            cfg.k = k;
            let set = kmeans_fit(&train_m, &cfg.kmeans_config())?;
            let seqs = p.sequences(&set);
            let mut planner = Planner::<f32>::new(cfg.planner_config(), Some(&set.centroids))?;
            train_planner(
                &mut planner,
                &p.planner_articles(&p.splits.train, &seqs)?,
                &p.planner_articles(&p.splits.val, &seqs)?,
                &cfg.planner_train_config(),
            )?;
            let eval_ids = p.split(&cfg.eval_split)?;
            let metrics = evaluate_planner(&planner, &p.planner_articles(eval_ids, &seqs)?)?;
            let train = p.documents(&p.splits.train, &seqs)?;
            let val = p.documents(&p.splits.val, &seqs)?;
            let model = finetune_model(&cfg, &base, RegimeSpec::adapter(Regime::PredictedPa), &set, &train, &val, Some(&planner))?;
            let g = Generator { model: &model, encoder: &p.encoder, actions: &set, vocab: &p.vocab };
            let ppl = regime_perplexity(&g, &p.documents(eval_ids, &seqs)?, Some(&planner))?;
            rows.push(SweepRow { k, ppl, accuracy: metrics.accuracy, average_rank: metrics.average_rank });
        }
        let mut w = BufWriter::new(File::create(self.path(SWEEP))?);
        writeln!(w, "k,ppl,accuracy,average_rank")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.k, r.ppl, r.accuracy, r.average_rank)?;
        }
        w.flush()?;
        self.finish("sweep-k", &[EMBEDDINGS, BASE_LM], &[SWEEP.into()], t)?;
        Ok(rows)
    }

    /// Every stage from ingestion to evaluation of the configured regime.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.ingest()?;
        self.embed()?;
        self.cluster()?;
        self.actions()?;
        let spec = self.config.regime_spec();
        if needs_planner(&spec) {
            self.train_planner()?;
        }
        self.pretrain_lm()?;
        self.finetune()?;
        self.evaluate()
    }
}
