//! External planner: predicts the next writing action from the embeddings of
//! the sentences written so far.
//!
//! Context rows get a learned absolute position embedding, pass through a
//! bidirectional transformer encoder, are mean-pooled, and a linear head
//! scores the `K` actions. An empty context is replaced by a learned
//! "begin" row.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionId, ActionSequence, ActionSet};
use crate::autodiff::{Adam, AdamConfig, AttnSpec, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::ArticleEmbeddings;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{gaussian, linear, Block, Norm};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerVariant {
    /// Positions, transformer encoder, mean pooling, linear head.
    Transformer,
    /// Ablation without sentence-level representations: the context is
    /// mean-pooled first and scored by a one-layer MLP.
    MeanPoolMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// `W_o` rows start as the action centroids.
    Centroids,
    Random,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub dim: usize,
    pub k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub variant: PlannerVariant,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl PlannerConfig {
    pub fn new(dim: usize, k: usize) -> Self {
        Self {
            dim,
            k,
            n_layers: 2,
            n_heads: 4,
            max_context: 64,
            variant: PlannerVariant::Transformer,
            head_init: HeadInit::Centroids,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.k == 0 || self.max_context == 0 {
            return Err(invalid("planner dim, k and max_context must be positive"));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(invalid(format!("planner dim {} not divisible by {} heads", self.dim, self.n_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, learning_rate: 1e-4, max_epochs: 30, patience: 3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerMetrics {
    pub accuracy: f64,
    pub average_rank: f64,
}

/// Sentence embeddings of one article with the action of every sentence.
#[derive(Clone, Debug)]
pub struct PlannerArticle {
    pub id: String,
    pub embeddings: Matrix<f32>,
    pub actions: Vec<ActionId>,
}

impl PlannerArticle {
    pub fn new(id: impl Into<String>, embeddings: Matrix<f32>, actions: Vec<ActionId>) -> Result<Self> {
        if embeddings.rows() != actions.len() {
            return Err(Error::Shape { op: "planner article", left: vec![embeddings.rows()], right: vec![actions.len()] });
        }
        Ok(Self { id: id.into(), embeddings, actions })
    }

    /// Pairs action sequences with their embeddings by article id.
    pub fn collect(sequences: &[ActionSequence], embeddings: &ArticleEmbeddings) -> Result<Vec<Self>> {
        sequences
            .iter()
            .map(|s| {
                let e = embeddings
                    .get(&s.article_id)
                    .ok_or_else(|| invalid(format!("no embeddings for article {}", s.article_id)))?;
                Self::new(s.article_id.clone(), e.clone(), s.actions.clone())
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Body {
    Transformer { pos: ParamId, blocks: Vec<Block>, ln_f: Norm },
    MeanPoolMlp { w: ParamId, b: ParamId },
}

/// Planner parameters, generic over the scalar type.
#[derive(Clone, Debug)]
pub struct Planner<S: Scalar = f32> {
    config: PlannerConfig,
    store: ParamStore<S>,
    begin: ParamId,
    body: Body,
    w_o: ParamId,
    b_o: ParamId,
    calls: CallCounter,
}

/// Number of contexts scored by inference calls; cloning copies the count.
#[derive(Debug, Default)]
struct CallCounter(AtomicU64);

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

pub const PLANNER_KIND: &str = "planner";

impl<S: Scalar> Planner<S> {
    /// `centroids` is required when the head is centroid-initialized.
    pub fn new(config: PlannerConfig, centroids: Option<&Matrix<f32>>) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.dim, config.k);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let begin = store.add("planner.begin", gaussian(&[1, d], 0.02, &mut rng));
        let body = match config.variant {
            PlannerVariant::Transformer => {
                let pos = store.add("planner.pos", gaussian(&[config.max_context, d], 0.02, &mut rng));
                let blocks = (0..config.n_layers)
                    .map(|i| Block::register(&mut store, &format!("planner.layer{i}"), d, config.n_heads, &mut rng))
                    .collect();
                let ln_f = Norm::register(&mut store, "planner.ln_f", d);
                Body::Transformer { pos, blocks, ln_f }
            }
            PlannerVariant::MeanPoolMlp => Body::MeanPoolMlp {
                w: store.add("planner.mlp.w", gaussian(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng)),
                b: store.add("planner.mlp.b", Tensor::zeros(&[d])),
            },
        };
        let w_init = match config.head_init {
            HeadInit::Centroids => {
                let c = centroids.ok_or_else(|| invalid("centroid head init needs the action centroids"))?;
                if c.rows() != k || c.cols() != d {
                    return Err(Error::Shape { op: "planner head init", left: vec![k, d], right: vec![c.rows(), c.cols()] });
                }
                Tensor::new(vec![k, d], c.data().iter().map(|&v| S::from_f64_lossy(v as f64)).collect())?
            }
            HeadInit::Random => gaussian(&[k, d], 0.02, &mut rng),
            HeadInit::Zero => Tensor::zeros(&[k, d]),
        };
        let w_o = store.add("planner.w_o", w_init);
        let b_o = store.add("planner.b_o", Tensor::zeros(&[k]));
        Ok(Self { config, store, begin, body, w_o, b_o, calls: CallCounter::default() })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Contexts scored by [`Self::forward_batch`] since construction.
    pub fn invocations(&self) -> u64 {
        self.calls.0.load(Ordering::Relaxed)
    }

    pub fn head(&self) -> &Tensor<S> {
        self.store.value(self.w_o)
    }

    /// The most recent `max_context` rows of a context.
    pub fn window<'a>(&self, context: &'a [&'a [f32]]) -> &'a [&'a [f32]] {
        &context[context.len().saturating_sub(self.config.max_context)..]
    }

    /// Builds `[B, K]` logits for a batch of contexts on `tape`.
    pub fn logits(&self, tape: &mut Tape<S>, contexts: &[&[&[f32]]]) -> Result<Var> {
        let d = self.config.dim;
        let b = contexts.len();
        if b == 0 {
            return Err(invalid("empty planner batch"));
        }
        let contexts: Vec<&[&[f32]]> = contexts.iter().map(|c| self.window(c)).collect();
        if let Some(bad) = contexts.iter().flat_map(|c| c.iter()).find(|r| r.len() != d) {
            return Err(Error::Shape { op: "planner context", left: vec![d], right: vec![bad.len()] });
        }
        let pooled = match &self.body {
            Body::Transformer { pos, blocks, ln_f } => {
                let t = contexts.iter().map(|c| c.len().max(1)).max().unwrap_or(1);
                let lens: Vec<usize> = contexts.iter().map(|c| c.len().max(1)).collect();
                let mut z = vec![S::zero(); b * t * d];
                let mut pos_ids = Vec::with_capacity(b * t);
                let mut begin_ids = Vec::with_capacity(b * t);
                for (bi, c) in contexts.iter().enumerate() {
                    for r in 0..t {
                        let row = bi * t + r;
                        if r < c.len() {
                            for (dst, &v) in z[row * d..(row + 1) * d].iter_mut().zip(c[r]) {
                                *dst = S::from_f64_lossy(v as f64);
                            }
                        }
                        let real = r < lens[bi];
                        pos_ids.push(real.then_some(r));
                        begin_ids.push((r == 0 && c.is_empty()).then_some(0));
                    }
                }
                let z = tape.constant(Tensor::new(vec![b * t, d], z)?);
                let pos_table = tape.param(&self.store, *pos);
                let p = tape.embedding_opt(pos_table, pos_ids)?;
                let begin_table = tape.param(&self.store, self.begin);
                let bg = tape.embedding_opt(begin_table, begin_ids)?;
                let mut x = tape.add(z, p)?;
                x = tape.add(x, bg)?;
                let spec = AttnSpec { batch: b, seq: t, heads: self.config.n_heads, causal: false, lens: Some(lens.clone()) };
                for block in blocks {
                    x = block.forward(tape, &self.store, x, &spec, None)?;
                }
                let x = ln_f.forward(tape, &self.store, x)?;
                tape.masked_mean_rows(x, t, &lens)?
            }
            Body::MeanPoolMlp { w, b: bias } => {
                let mut mean = vec![S::zero(); b * d];
                for (bi, c) in contexts.iter().enumerate() {
                    let inv = 1.0 / c.len().max(1) as f64;
                    for r in c.iter() {
                        for (dst, &v) in mean[bi * d..(bi + 1) * d].iter_mut().zip(r.iter()) {
                            *dst += S::from_f64_lossy(v as f64 * inv);
                        }
                    }
                }
                let m = tape.constant(Tensor::new(vec![b, d], mean)?);
                let begin_table = tape.param(&self.store, self.begin);
                let bg = tape.embedding_opt(begin_table, contexts.iter().map(|c| c.is_empty().then_some(0)).collect())?;
                let x = tape.add(m, bg)?;
                let h = linear(tape, &self.store, x, *w, *bias)?;
                tape.gelu(h)
            }
        };
        let w = tape.param(&self.store, self.w_o);
        let logits = tape.matmul_nt(pooled, w)?;
        let bias = tape.param(&self.store, self.b_o);
        tape.add(logits, bias)
    }

    /// Probability vectors over the `K` actions, one per context.
    pub fn forward_batch(&self, contexts: &[&[&[f32]]]) -> Result<Vec<Vec<f64>>> {
        self.calls.0.fetch_add(contexts.len() as u64, Ordering::Relaxed);
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, contexts)?;
        let t = tape.value(logits);
        Ok((0..t.rows()).map(|r| softmax_f64(t.row(r))).collect())
    }

    pub fn forward(&self, context: &[&[f32]]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&[context])?.remove(0))
    }

    pub fn predict(&self, context: &[&[f32]]) -> Result<ActionId> {
        Ok(argmax(&self.forward(context)?))
    }

    /// `â_j` for every sentence `j`, each from the embeddings of the
    /// sentences before it.
    pub fn predict_actions_for_article(&self, embeddings: &Matrix<f32>) -> Result<Vec<ActionId>> {
        Ok(self.prefix_scores(embeddings)?.iter().map(|p| argmax(p)).collect())
    }

    fn prefix_scores(&self, embeddings: &Matrix<f32>) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f32]> = embeddings.iter_rows().collect();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in (0..rows.len()).collect::<Vec<_>>().chunks(64) {
            let ctxs: Vec<&[&[f32]]> = chunk.iter().map(|&j| &rows[..j]).collect();
            out.extend(self.forward_batch(&ctxs)?);
        }
        Ok(out)
    }

    /// Mean cross-entropy of the next action over every position of `articles`.
    pub fn loss(&self, articles: &[PlannerArticle]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for a in articles {
            for (p, &y) in self.prefix_scores(&a.embeddings)?.iter().zip(&a.actions) {
                total -= p[y].max(f64::MIN_POSITIVE).ln();
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "kind": PLANNER_KIND, "config": self.config });
        let mut ck = Checkpoint::with_meta(meta);
        ck.push_params(&self.store);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta = ck.meta.as_ref().ok_or_else(|| Error::Format { format: "PLMC", reason: "planner checkpoint lacks metadata".into() })?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some(PLANNER_KIND) {
            return Err(Error::Format { format: "PLMC", reason: "not a planner checkpoint".into() });
        }
        let mut config: PlannerConfig = serde_json::from_value(meta["config"].clone())?;
        let head_init = config.head_init;
        config.head_init = HeadInit::Zero;
        let mut planner = Self::new(config, None)?;
        planner.config.head_init = head_init;
        ck.load_params(&mut planner.store)?;
        Ok(planner)
    }
}

pub fn softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `1 + #{j : scores[j] > scores[oracle]}`.
pub fn rank_of(scores: &[f64], oracle: ActionId) -> usize {
    1 + scores.iter().filter(|&&s| s > scores[oracle]).count()
}

fn metrics_from(scores: impl Iterator<Item = (Vec<f64>, ActionId)>) -> PlannerMetrics {
    let (mut hits, mut ranks, mut n) = (0usize, 0usize, 0usize);
    for (s, y) in scores {
        hits += usize::from(argmax(&s) == y);
        ranks += rank_of(&s, y);
        n += 1;
    }
    if n == 0 {
        return PlannerMetrics { accuracy: 0.0, average_rank: 1.0 };
    }
    PlannerMetrics { accuracy: hits as f64 / n as f64, average_rank: ranks as f64 / n as f64 }
}

/// Accuracy and average oracle rank over every position of `articles`.
pub fn evaluate_planner<S: Scalar>(planner: &Planner<S>, articles: &[PlannerArticle]) -> Result<PlannerMetrics> {
    evaluate_planner_with_context(planner, articles, 0)
}

/// As [`evaluate_planner`], restricted to positions preceded by at least
/// `min_context` sentences.
pub fn evaluate_planner_with_context<S: Scalar>(
    planner: &Planner<S>,
    articles: &[PlannerArticle],
    min_context: usize,
) -> Result<PlannerMetrics> {
    let mut all = Vec::new();
    for a in articles {
        all.extend(planner.prefix_scores(&a.embeddings)?.into_iter().zip(a.actions.iter().copied()).skip(min_context));
    }
    Ok(metrics_from(all.into_iter()))
}

/// As [`evaluate_planner`], after adding independent uniform noise of
/// amplitude `noise` to every score, which breaks exact ties at random.
pub fn evaluate_planner_noisy<S: Scalar>(
    planner: &Planner<S>,
    articles: &[PlannerArticle],
    noise: f64,
    seed: u64,
) -> Result<PlannerMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::new();
    for a in articles {
        for (mut s, &y) in planner.prefix_scores(&a.embeddings)?.into_iter().zip(&a.actions) {
            s.iter_mut().for_each(|v| *v += noise * rng.random_range(-1.0..1.0));
            all.push((s, y));
        }
    }
    Ok(metrics_from(all.into_iter()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerEpoch {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerTrainReport {
    pub epochs: Vec<PlannerEpoch>,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Minimizes next-action cross-entropy over every position of `train`,
/// keeping the parameters of the epoch with the lowest validation loss and
/// stopping after `patience` epochs without improvement.
pub fn train_planner<S: Scalar>(
    planner: &mut Planner<S>,
    train: &[PlannerArticle],
    val: &[PlannerArticle],
    config: &PlannerTrainConfig,
) -> Result<PlannerTrainReport> {
    if config.batch_size == 0 {
        return Err(invalid("planner batch size must be positive"));
    }
    let mut examples: Vec<(usize, usize)> =
        train.iter().enumerate().flat_map(|(a, art)| (0..art.actions.len()).map(move |j| (a, j))).collect();
    let rows: Vec<Vec<&[f32]>> = train.iter().map(|a| a.embeddings.iter_rows().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() });
    let mut report = PlannerTrainReport { epochs: Vec::new(), best_epoch: 0, steps: 0 };
    let mut best: Option<(f64, ParamStore<S>)> = None;
    let mut stale = 0;
    for _ in 0..config.max_epochs {
        examples.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in examples.chunks(config.batch_size) {
            let ctxs: Vec<&[&[f32]]> = batch.iter().map(|&(a, j)| &rows[a][..j]).collect();
            let targets: Vec<usize> = batch.iter().map(|&(a, j)| train[a].actions[j]).collect();
            let mut tape = Tape::new();
            let logits = planner.logits(&mut tape, &ctxs)?;
            let loss = tape.cross_entropy(logits, &targets, None)?;
            sum += tape.value(loss).item().as_f64() * batch.len() as f64;
            n += batch.len();
            tape.backward(loss, &mut planner.store)?;
            adam.step(&mut planner.store);
        }
        let train_loss = if n == 0 { 0.0 } else { sum / n as f64 };
        let val_loss = if val.is_empty() { None } else { Some(planner.loss(val)?) };
        report.epochs.push(PlannerEpoch { train_loss, val_loss });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, planner.store.clone()));
            report.best_epoch = report.epochs.len() - 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        planner.store = store;
    }
    report.steps = adam.steps();
    Ok(report)
}

/// Planner-predicted sequences for a set of articles.
pub fn predict_sequences<S: Scalar>(planner: &Planner<S>, articles: &[PlannerArticle]) -> Result<Vec<ActionSequence>> {
    articles
        .iter()
        .map(|a| Ok(ActionSequence { article_id: a.id.clone(), actions: planner.predict_actions_for_article(&a.embeddings)? }))
        .collect()
}

/// Convenience for binding a planner to an action set.
pub fn planner_for(set: &ActionSet<f32>, config: PlannerConfig) -> Result<Planner<f32>> {
    if config.k != set.k() || config.dim != set.dim() {
        return Err(Error::Shape { op: "planner config", left: vec![config.k, config.dim], right: vec![set.k(), set.dim()] });
    }
    Planner::new(config, Some(&set.centroids))
}
