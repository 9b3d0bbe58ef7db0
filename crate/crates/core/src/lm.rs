//! Small decoder-only language model with action conditioning.
//!
//! Adapter style adds `r = W_A E_A(a)` to the concatenated attention context
//! of the last `L` blocks, just before the attention output projection.
//! Insert style instead extends the vocabulary with one token per action and
//! interleaves action tokens before each sentence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::ActionId;
use crate::autodiff::{
    attention_forward, gelu_scalar, layer_norm_rows, softmax_in_place, Adam, AdamConfig, AttnSpec, Checkpoint, ParamId,
    ParamStore, Tape, Tensor, Var,
};
use crate::corpus::{ProcessedArticle, TokenId, BOS};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{gaussian, Block, Norm};
use crate::planner::Planner;
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 256, n_layers: 4, n_heads: 4, context: 128, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.n_layers == 0 || self.context < 2 {
            return Err(invalid("lm needs vocab >= 2, d_model > 0, n_layers > 0 and context >= 2"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!("lm d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    Centroids,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub k: usize,
    pub action_dim: usize,
    /// Number of trailing blocks that receive the action.
    pub layers: usize,
    pub init: AdapterInit,
    /// One action table shared by every adapted block.
    pub shared_table: bool,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(k: usize, action_dim: usize, n_layers: usize) -> Self {
        Self { k, action_dim, layers: (n_layers / 2).max(1), init: AdapterInit::Centroids, shared_table: false, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    None,
    Fixed,
    Oracle,
    PredictedOa,
    PredictedPa,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::None, Regime::Fixed, Regime::Oracle, Regime::PredictedOa, Regime::PredictedPa];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Fixed => "fixed",
            Regime::Oracle => "oracle",
            Regime::PredictedOa => "predicted_oa",
            Regime::PredictedPa => "predicted_pa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| invalid(format!("unknown regime {s:?}")))
    }

    pub fn needs_planner(self) -> bool {
        matches!(self, Regime::PredictedOa | Regime::PredictedPa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Adapter,
    Insert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locus {
    External,
    Internal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub style: Style,
    pub locus: Locus,
}

impl RegimeSpec {
    pub fn adapter(regime: Regime) -> Self {
        Self { regime, style: Style::Adapter, locus: Locus::External }
    }

    pub fn validate(&self) -> Result<()> {
        if self.locus == Locus::Internal && self.style != Style::Insert {
            return Err(invalid("the internal planner requires insert style"));
        }
        Ok(())
    }
}

/// Which phase an action source is resolved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-sentence actions a regime conditions on, or `None` when it does not
/// condition at all. Planner predictions use each sentence's predecessors.
pub fn regime_actions(
    regime: Regime,
    phase: Phase,
    doc: &LmDocument,
    planner: Option<&Planner<f32>>,
) -> Result<Option<Vec<ActionId>>> {
    let m = doc.oracle.len();
    let planned = || -> Result<Vec<ActionId>> {
        let p = planner.ok_or_else(|| Error::PlannerRequired(regime.name().to_string()))?;
        let e = doc
            .embeddings
            .as_ref()
            .ok_or_else(|| invalid(format!("article {} has no sentence embeddings for the planner", doc.id)))?;
        p.predict_actions_for_article(e)
    };
    Ok(match (regime, phase) {
        (Regime::None, _) => None,
        (Regime::Fixed, _) => Some(vec![0; m]),
        (Regime::Oracle, _) | (Regime::PredictedOa, Phase::Train) => Some(doc.oracle.clone()),
        (Regime::PredictedOa, Phase::Eval) | (Regime::PredictedPa, _) => Some(planned()?),
    })
}

/// The action of the sentence that contains token `p + 1`, or of the last
/// sentence when `p + 1` is past the end.
pub fn select_action_for_position(sentence_of: &[usize], actions: &[ActionId], p: usize) -> ActionId {
    let s = sentence_of.get(p + 1).or(sentence_of.last()).copied().unwrap_or(0);
    actions[s.min(actions.len() - 1)]
}

/// Tokenized article prepared for language modelling. `tokens` excludes
/// the leading `<bos>`, which [`LmDocument::input_ids`] adds back.
#[derive(Clone, Debug)]
pub struct LmDocument {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub sentence_of: Vec<usize>,
    pub oracle: Vec<ActionId>,
    pub embeddings: Option<Matrix<f32>>,
}

impl LmDocument {
    pub fn new(article: &ProcessedArticle, oracle: Vec<ActionId>, embeddings: Option<Matrix<f32>>) -> Result<Self> {
        if oracle.len() != article.sentences.len() {
            return Err(Error::Shape { op: "lm document", left: vec![article.sentences.len()], right: vec![oracle.len()] });
        }
        let skip = usize::from(article.stream.token_ids.first() == Some(&BOS));
        Ok(Self {
            id: article.id.clone(),
            tokens: article.stream.token_ids[skip..].to_vec(),
            sentence_of: article.stream.sentence_index_of_token[skip..].to_vec(),
            oracle,
            embeddings,
        })
    }

    /// `<bos>` followed by the article tokens.
    pub fn input_ids(&self) -> Vec<usize> {
        std::iter::once(BOS as usize).chain(self.tokens.iter().map(|&t| t as usize)).collect()
    }

    /// Action for each input position of [`Self::input_ids`] except the
    /// last: position `q` predicts token `q`, so it takes that token's
    /// sentence action.
    pub fn position_actions(&self, sentence_actions: &[ActionId]) -> Vec<ActionId> {
        self.sentence_of.iter().map(|&s| sentence_actions[s]).collect()
    }

    /// Tokens grouped by sentence.
    pub fn sentences(&self) -> Vec<Vec<TokenId>> {
        let m = self.sentence_of.last().map_or(0, |&s| s + 1).max(self.oracle.len());
        let mut out = vec![Vec::new(); m];
        for (&t, &s) in self.tokens.iter().zip(&self.sentence_of) {
            out[s].push(t);
        }
        out
    }
}

/// Interleaves `a + V` before the tokens of every sentence.
pub fn insert_style_sequence(sentences: &[Vec<TokenId>], actions: &[ActionId], vocab_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(sentences.iter().map(Vec::len).sum::<usize>() + sentences.len());
    for (s, &a) in sentences.iter().zip(actions) {
        out.push(a + vocab_size);
        out.extend(s.iter().map(|&t| t as usize));
    }
    out
}

/// Inverse of [`insert_style_sequence`].
pub fn deinterleave(ids: &[usize], vocab_size: usize) -> (Vec<Vec<TokenId>>, Vec<ActionId>) {
    let (mut sentences, mut actions) = (Vec::new(), Vec::new());
    for &id in ids {
        if id >= vocab_size {
            actions.push(id - vocab_size);
            sentences.push(Vec::new());
        } else if let Some(last) = sentences.last_mut() {
            last.push(id as TokenId);
        }
    }
    (sentences, actions)
}


/// Conditioning of one sequence: nothing, an action per position, or an
/// action per position with an additive perturbation of its embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    None,
    Actions(Vec<ActionId>),
    Perturbed { actions: Vec<ActionId>, noise: Vec<f32> },
}

impl Conditioning {
    fn len(&self) -> Option<usize> {
        match self {
            Conditioning::None => None,
            Conditioning::Actions(a) | Conditioning::Perturbed { actions: a, .. } => Some(a.len()),
        }
    }
}

#[derive(Clone, Debug)]
struct AdapterLayer {
    layer: usize,
    e_a: ParamId,
    w_a: ParamId,
}

pub const LM_KIND: &str = "lm";

/// Decoder-only transformer, generic over the scalar type.
#[derive(Clone, Debug)]
pub struct LanguageModel<S: Scalar = f32> {
    config: LmConfig,
    adapter_config: Option<AdapterConfig>,
    /// Number of action tokens appended to the vocabulary (insert style).
    action_tokens: usize,
    pub regime: Option<RegimeSpec>,
    store: ParamStore<S>,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head_w: ParamId,
    head_b: ParamId,
    adapter: Vec<AdapterLayer>,
}

impl<S: Scalar> LanguageModel<S> {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tok = store.add("lm.tok_emb", gaussian(&[v, d], 0.02, &mut rng));
        let pos = store.add("lm.pos_emb", gaussian(&[config.context, d], 0.02, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|i| Block::register(&mut store, &format!("lm.layer{i}"), d, config.n_heads, &mut rng))
            .collect();
        let ln_f = Norm::register(&mut store, "lm.ln_f", d);
        // Stored [V, d'] so that vocabulary extension appends rows.
        let head_w = store.add("lm.head.w", gaussian(&[v, d], 0.02, &mut rng));
        let head_b = store.add("lm.head.b", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            adapter_config: None,
            action_tokens: 0,
            regime: None,
            store,
            tok,
            pos,
            blocks,
            ln_f,
            head_w,
            head_b,
            adapter: Vec::new(),
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapter_config.as_ref()
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Text vocabulary size, excluding appended action tokens.
    pub fn text_vocab(&self) -> usize {
        self.config.vocab_size - self.action_tokens
    }

    pub fn action_tokens(&self) -> usize {
        self.action_tokens
    }

    /// Total output rows (text plus action tokens).
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn context(&self) -> usize {
        self.config.context
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        self.adapter.iter().map(|a| a.layer).collect()
    }

    /// Adds an action adapter to the last `config.layers` blocks.
    pub fn attach_adapter(&mut self, config: AdapterConfig, centroids: Option<&Matrix<f32>>) -> Result<()> {
        if !self.adapter.is_empty() {
            return Err(invalid("model already has an adapter"));
        }
        if config.layers == 0 || config.layers > self.config.n_layers || config.k == 0 || config.action_dim == 0 {
            return Err(invalid(format!("adapter needs 1..={} layers and positive k, dim", self.config.n_layers)));
        }
        let (k, d, dm) = (config.k, config.action_dim, self.config.d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0ada_97e4);
        let table = |rng: &mut ChaCha8Rng| -> Result<Tensor<S>> {
            match config.init {
                AdapterInit::Centroids => {
                    let c = centroids.ok_or_else(|| invalid("centroid adapter init needs the action centroids"))?;
                    if c.rows() != k || c.cols() != d {
                        return Err(Error::Shape { op: "adapter init", left: vec![k, d], right: vec![c.rows(), c.cols()] });
                    }
                    Tensor::new(vec![k, d], c.data().iter().map(|&v| S::from_f64_lossy(v as f64)).collect())
                }
                AdapterInit::Random => Ok(gaussian(&[k, d], 1.0 / (d as f64).sqrt(), rng)),
            }
        };
        let first = self.config.n_layers - config.layers;
        let shared = if config.shared_table { Some(self.store.add("lm.adapter.e_a", table(&mut rng)?)) } else { None };
        for l in first..self.config.n_layers {
            let e_a = match shared {
                Some(id) => id,
                None => self.store.add(format!("lm.layer{l}.adapter.e_a"), table(&mut rng)?),
            };
            let w_a = self.store.add(format!("lm.layer{l}.adapter.w_a"), gaussian(&[dm, d], 0.02, &mut rng));
            self.adapter.push(AdapterLayer { layer: l, e_a, w_a });
        }
        self.adapter_config = Some(config);
        Ok(())
    }

    pub fn adapter_tables(&self) -> Vec<&Tensor<S>> {
        let mut ids: Vec<ParamId> = self.adapter.iter().map(|a| a.e_a).collect();
        ids.dedup();
        ids.into_iter().map(|id| self.store.value(id)).collect()
    }

    /// Parameter ids of every `W_A`, in layer order.
    pub fn adapter_projection_ids(&self) -> Vec<ParamId> {
        self.adapter.iter().map(|a| a.w_a).collect()
    }

    /// Only adapter parameters train; everything else is frozen.
    pub fn freeze_base(&mut self) {
        self.store.set_all_requires_grad(false);
        for a in &self.adapter {
            self.store.set_requires_grad(a.e_a, true);
            self.store.set_requires_grad(a.w_a, true);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_all_requires_grad(true);
    }

    /// Bytes of every non-adapter parameter, for frozen-base checks.
    pub fn base_fingerprint(&self) -> Vec<u8> {
        let adapter: Vec<ParamId> = self.adapter.iter().flat_map(|a| [a.e_a, a.w_a]).collect();
        let mut out = Vec::new();
        for (id, p) in self.store.iter() {
            if !adapter.contains(&id) {
                out.extend(p.value.data().iter().flat_map(|v| v.as_f64().to_le_bytes()));
            }
        }
        out
    }

    /// `[B*T, V]` logits for `B` padded sequences of length `T`.
    pub fn logits(&self, tape: &mut Tape<S>, tokens: &[usize], seq: usize, lens: &[usize], cond: &Conditioning) -> Result<Var> {
        let batch = lens.len();
        let n = batch * seq;
        if tokens.len() != n || seq > self.config.context || seq == 0 {
            return Err(Error::Shape { op: "lm logits", left: vec![batch, seq], right: vec![tokens.len(), self.config.context] });
        }
        if let Some(l) = cond.len() {
            if l != n {
                return Err(Error::Shape { op: "lm conditioning", left: vec![n], right: vec![l] });
            }
        }
        let table = tape.param(&self.store, self.tok);
        let x = tape.embedding(table, tokens)?;
        let pos_table = tape.param(&self.store, self.pos);
        let pos_ids: Vec<usize> = (0..n).map(|i| i % seq).collect();
        let p = tape.embedding(pos_table, &pos_ids)?;
        let mut x = tape.add(x, p)?;
        let spec = AttnSpec { batch, seq, heads: self.config.n_heads, causal: true, lens: Some(lens.to_vec()) };
        for (l, block) in self.blocks.iter().enumerate() {
            let r = match (self.adapter.iter().find(|a| a.layer == l), cond) {
                (Some(a), Conditioning::Actions(ids)) => Some(self.adapter_term(tape, a, ids, None)?),
                (Some(a), Conditioning::Perturbed { actions, noise }) => Some(self.adapter_term(tape, a, actions, Some(noise))?),
                _ => None,
            };
            x = block.forward(tape, &self.store, x, &spec, r)?;
        }
        let x = self.ln_f.forward(tape, &self.store, x)?;
        let w = tape.param(&self.store, self.head_w);
        let logits = tape.matmul_nt(x, w)?;
        let b = tape.param(&self.store, self.head_b);
        tape.add(logits, b)
    }

    fn adapter_term(&self, tape: &mut Tape<S>, a: &AdapterLayer, ids: &[ActionId], noise: Option<&[f32]>) -> Result<Var> {
        let table = tape.param(&self.store, a.e_a);
        let mut e = tape.embedding(table, ids)?;
        if let Some(noise) = noise {
            let d = self.store.value(a.e_a).cols();
            let t = Tensor::new(vec![ids.len(), d], noise.iter().map(|&v| S::from_f64_lossy(v as f64)).collect())?;
            let c = tape.constant(t);
            e = tape.add(e, c)?;
        }
        let w = tape.param(&self.store, a.w_a);
        tape.matmul_nt(e, w)
    }

    /// Logits of a single unpadded sequence, one row per position.
    pub fn sequence_logits(&self, tokens: &[usize], cond: &Conditioning) -> Result<Vec<Vec<S>>> {
        let mut tape = Tape::new();
        let out = self.logits(&mut tape, tokens, tokens.len(), &[tokens.len()], cond)?;
        let t = tape.value(out);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Copy with `extra` action tokens appended to the input embedding and
    /// output projection; new rows are Gaussian(0, 0.02).
    pub fn extend_vocab(&self, extra: usize, seed: u64) -> Result<Self> {
        if !self.adapter.is_empty() {
            return Err(invalid("vocabulary extension applies to the base model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let d = self.config.d_model;
        let v = self.config.vocab_size + extra;
        for id in [self.tok, self.head_w] {
            let old = self.store.value(id);
            let mut data = old.data().to_vec();
            data.extend(gaussian::<S, _>(&[extra, d], 0.02, &mut rng).into_data());
            *out.store.value_mut(id) = Tensor::new(vec![v, d], data)?;
        }
        let mut bias = self.store.value(self.head_b).data().to_vec();
        bias.resize(v, S::zero());
        *out.store.value_mut(self.head_b) = Tensor::new(vec![v], bias)?;
        out.config.vocab_size = v;
        out.action_tokens = self.action_tokens + extra;
        out.store.zero_grads();
        Ok(out)
    }

    pub fn cast<T: Scalar>(&self) -> LanguageModel<T> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            let id = store.add(p.name.clone(), p.value.cast());
            store.set_requires_grad(id, p.requires_grad);
        }
        LanguageModel {
            config: self.config.clone(),
            adapter_config: self.adapter_config.clone(),
            action_tokens: self.action_tokens,
            regime: self.regime,
            store,
            tok: self.tok,
            pos: self.pos,
            blocks: self.blocks.clone(),
            ln_f: self.ln_f,
            head_w: self.head_w,
            head_b: self.head_b,
            adapter: self.adapter.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": LM_KIND,
            "config": self.config,
            "adapter": self.adapter_config,
            "action_tokens": self.action_tokens,
            "regime": self.regime,
        });
        let mut ck = Checkpoint::with_meta(meta);
        ck.push_params(&self.store);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |r: &str| Error::Format { format: "PLMC", reason: r.to_string() };
        let meta = ck.meta.as_ref().ok_or_else(|| bad("lm checkpoint lacks metadata"))?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some(LM_KIND) {
            return Err(bad("not a language-model checkpoint"));
        }
        let mut config: LmConfig = serde_json::from_value(meta["config"].clone())?;
        let action_tokens = meta.get("action_tokens").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        config.vocab_size -= action_tokens;
        let mut model = Self::new(config)?;
        if action_tokens > 0 {
            model = model.extend_vocab(action_tokens, 0)?;
        }
        let adapter: Option<AdapterConfig> = serde_json::from_value(meta["adapter"].clone())?;
        if let Some(mut a) = adapter {
            let init = a.init;
            a.init = AdapterInit::Random;
            model.attach_adapter(a, None)?;
            if let Some(c) = model.adapter_config.as_mut() {
                c.init = init;
            }
        }
        model.regime = serde_json::from_value(meta["regime"].clone())?;
        ck.load_params(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One training or scoring window: inputs, next-token targets, per-target
/// loss weights, and per-position actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f32>,
    pub actions: Option<Vec<ActionId>>,
    pub noise: Option<Vec<f32>>,
}

impl Window {
    fn conditioning(&self, pad_to: usize, dim: usize) -> Conditioning {
        let pad = |a: &[ActionId]| {
            let mut v = a.to_vec();
            v.resize(pad_to, 0);
            v
        };
        match (&self.actions, &self.noise) {
            (None, _) => Conditioning::None,
            (Some(a), None) => Conditioning::Actions(pad(a)),
            (Some(a), Some(n)) => {
                let mut noise = n.clone();
                noise.resize(pad_to * dim, 0.0);
                Conditioning::Perturbed { actions: pad(a), noise }
            }
        }
    }
}

/// Splits a full `inputs`/`targets` stream into non-overlapping windows of
/// at most `context` positions.
pub fn chunk_windows(
    inputs: &[usize],
    targets: &[usize],
    weights: &[f32],
    actions: Option<&[ActionId]>,
    context: usize,
) -> Vec<Window> {
    (0..inputs.len())
        .step_by(context)
        .map(|s| {
            let e = (s + context).min(inputs.len());
            Window {
                inputs: inputs[s..e].to_vec(),
                targets: targets[s..e].to_vec(),
                weights: weights[s..e].to_vec(),
                actions: actions.map(|a| a[s..e].to_vec()),
                noise: None,
            }
        })
        .collect()
}

/// Overlapping evaluation windows with stride `context / 2`. Each target is
/// scored exactly once: the first window scores everything, later windows
/// only the positions beyond what was already scored.
pub fn sliding_windows(
    inputs: &[usize],
    targets: &[usize],
    weights: &[f32],
    actions: Option<&[ActionId]>,
    context: usize,
) -> Vec<Window> {
    let n = inputs.len();
    let stride = (context / 2).max(1);
    let mut out = Vec::new();
    let (mut start, mut scored) = (0usize, 0usize);
    while scored < n {
        let end = (start + context).min(n);
        let mut w = weights[start..end].to_vec();
        for (i, v) in w.iter_mut().enumerate() {
            if start + i < scored {
                *v = 0.0;
            }
        }
        out.push(Window {
            inputs: inputs[start..end].to_vec(),
            targets: targets[start..end].to_vec(),
            weights: w,
            actions: actions.map(|a| a[start..end].to_vec()),
            noise: None,
        });
        scored = end;
        start += stride;
    }
    out
}

fn pack(windows: &[&Window]) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<f32>, usize) {
    let seq = windows.iter().map(|w| w.inputs.len()).max().unwrap_or(1);
    let mut tokens = Vec::with_capacity(windows.len() * seq);
    let mut targets = Vec::with_capacity(windows.len() * seq);
    let mut weights = Vec::with_capacity(windows.len() * seq);
    let mut lens = Vec::with_capacity(windows.len());
    for w in windows {
        let l = w.inputs.len();
        tokens.extend(&w.inputs);
        tokens.resize(tokens.len() + seq - l, 0);
        targets.extend(&w.targets);
        targets.resize(targets.len() + seq - l, 0);
        weights.extend(&w.weights);
        weights.resize(weights.len() + seq - l, 0.0);
        lens.push(l);
    }
    (tokens, targets, lens, weights, seq)
}

fn batch_conditioning<S: Scalar>(model: &LanguageModel<S>, windows: &[&Window], seq: usize) -> Result<Conditioning> {
    let conds: Vec<Conditioning> = windows
        .iter()
        .map(|w| w.conditioning(seq, model.adapter_config.as_ref().map_or(0, |a| a.action_dim)))
        .collect();
    if conds.iter().all(|c| *c == Conditioning::None) {
        return Ok(Conditioning::None);
    }
    if model.adapter.is_empty() {
        return Err(invalid("actions supplied to a model without an adapter"));
    }
    let mut actions = Vec::new();
    let mut noise = Vec::new();
    let mut perturbed = false;
    let dim = model.adapter_config.as_ref().map_or(0, |a| a.action_dim);
    for c in conds {
        match c {
            Conditioning::None => return Err(invalid("mixed conditioned and unconditioned windows in one batch")),
            Conditioning::Actions(a) => {
                noise.resize(noise.len() + a.len() * dim, 0.0);
                actions.extend(a);
            }
            Conditioning::Perturbed { actions: a, noise: n } => {
                perturbed = true;
                actions.extend(a);
                noise.extend(n);
            }
        }
    }
    Ok(if perturbed { Conditioning::Perturbed { actions, noise } } else { Conditioning::Actions(actions) })
}

/// Weighted negative log-likelihood per window: `(sum of w * nll, sum of w)`.
pub fn window_nll<S: Scalar>(model: &LanguageModel<S>, windows: &[Window], batch_size: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let (tokens, targets, lens, weights, seq) = pack(&refs);
        let cond = batch_conditioning(model, &refs, seq)?;
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape, &tokens, seq, &lens, &cond)?;
        let t = tape.value(logits);
        for (b, _) in refs.iter().enumerate() {
            let (mut nll, mut wsum) = (0.0, 0.0);
            for i in 0..seq {
                let r = b * seq + i;
                let w = weights[r] as f64;
                if w == 0.0 {
                    continue;
                }
                let row = t.row(r);
                let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                nll += w * (lse - row[targets[r]].as_f64());
                wsum += w;
            }
            out.push((nll, wsum));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub patience: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, learning_rate: 1e-4, max_epochs: 10, max_steps: None, patience: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub epochs: Vec<LmEpoch>,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Trains whichever parameters require gradients on `train` windows. When
/// `val` is non-empty, keeps the epoch with the lowest validation
/// perplexity and stops after `patience` epochs without improvement.
pub fn train_windows<S: Scalar>(
    model: &mut LanguageModel<S>,
    train: &[Window],
    val: &[Window],
    config: &LmTrainConfig,
) -> Result<LmTrainReport> {
    if config.batch_size == 0 {
        return Err(invalid("lm batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() });
    let mut report = LmTrainReport { epochs: Vec::new(), best_epoch: 0, steps: 0 };
    let mut best: Option<(f64, ParamStore<S>)> = None;
    let mut stale = 0;
    'epochs: for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| adam.steps() >= m) {
                break;
            }
            let refs: Vec<&Window> = batch.iter().map(|&i| &train[i]).collect();
            let (tokens, targets, lens, weights, seq) = pack(&refs);
            let cond = batch_conditioning(model, &refs, seq)?;
            let w: Vec<S> = weights.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
            let wsum: f64 = weights.iter().map(|&v| v as f64).sum();
            if wsum == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, &tokens, seq, &lens, &cond)?;
            let loss = tape.cross_entropy(logits, &targets, Some(&w))?;
            sum += tape.value(loss).item().as_f64() * wsum;
            n += wsum;
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
        }
        let train_loss = if n > 0.0 { sum / n } else { f64::NAN };
        let val_ppl = if val.is_empty() { None } else { Some(perplexity_of(&window_nll(model, val, config.batch_size)?)) };
        report.epochs.push(LmEpoch { train_loss, val_ppl });
        if let Some(ppl) = val_ppl {
            if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
                best = Some((ppl, model.store.clone()));
                report.best_epoch = report.epochs.len() - 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break 'epochs;
                }
            }
        } else {
            report.best_epoch = report.epochs.len() - 1;
        }
        if config.max_steps.is_some_and(|m| adam.steps() >= m) {
            break;
        }
    }
    if let Some((_, store)) = best {
        let flags: Vec<bool> = model.store.iter().map(|(_, p)| p.requires_grad).collect();
        model.store = store;
        for ((id, _), on) in model.store.iter().map(|(id, p)| (id, p.requires_grad)).collect::<Vec<_>>().into_iter().zip(flags) {
            model.store.set_requires_grad(id, on);
        }
    }
    report.steps = adam.steps();
    Ok(report)
}

/// `exp(sum nll / sum weight)` over windows.
pub fn perplexity_of(parts: &[(f64, f64)]) -> f64 {
    let (nll, n) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0.0 {
        f64::NAN
    } else {
        (nll / n).exp()
    }
}

/// Adapter-style windows for `docs` under per-sentence `actions`
/// (`None` = unconditioned).
pub fn adapter_windows(
    docs: &[LmDocument],
    actions: &[Option<Vec<ActionId>>],
    context: usize,
    sliding: bool,
) -> Vec<Window> {
    let mut out = Vec::new();
    for (doc, acts) in docs.iter().zip(actions) {
        let ids = doc.input_ids();
        let (inputs, targets) = (&ids[..ids.len() - 1], &ids[1..]);
        let weights = vec![1.0; inputs.len()];
        let pos = acts.as_ref().map(|a| doc.position_actions(a));
        if sliding {
            out.extend(sliding_windows(inputs, targets, &weights, pos.as_deref(), context));
        } else {
            out.extend(chunk_windows(inputs, targets, &weights, pos.as_deref(), context));
        }
    }
    out
}

/// Plain next-token pretraining on unconditioned documents.
pub fn pretrain_base<S: Scalar>(
    model: &mut LanguageModel<S>,
    train: &[LmDocument],
    val: &[LmDocument],
    config: &LmTrainConfig,
) -> Result<LmTrainReport> {
    model.unfreeze_all();
    let ctx = model.context();
    let none = |d: &[LmDocument]| vec![None; d.len()];
    let tw = adapter_windows(train, &none(train), ctx, false);
    let vw = adapter_windows(val, &none(val), ctx, true);
    train_windows(model, &tw, &vw, config)
}

/// Resolves regime actions for every document.
pub fn resolve_actions(
    regime: Regime,
    phase: Phase,
    docs: &[LmDocument],
    planner: Option<&Planner<f32>>,
) -> Result<Vec<Option<Vec<ActionId>>>> {
    if regime.needs_planner() && planner.is_none() {
        return Err(Error::PlannerRequired(regime.name().to_string()));
    }
    docs.iter().map(|d| regime_actions(regime, phase, d, planner)).collect()
}

/// Trains the adapter of `model` with the base frozen. `NONE` leaves the
/// model untouched. Predicted actions come from the frozen planner and are
/// computed once, since they cannot change between epochs.
pub fn finetune_adapter(
    model: &mut LanguageModel<f32>,
    regime: Regime,
    train: &[LmDocument],
    val: &[LmDocument],
    planner: Option<&Planner<f32>>,
    config: &LmTrainConfig,
) -> Result<LmTrainReport> {
    if regime.needs_planner() && planner.is_none() {
        return Err(Error::PlannerRequired(regime.name().to_string()));
    }
    model.regime = Some(RegimeSpec::adapter(regime));
    if regime == Regime::None {
        return Ok(LmTrainReport { epochs: Vec::new(), best_epoch: 0, steps: 0 });
    }
    if model.adapter.is_empty() {
        return Err(invalid("finetuning needs an attached adapter"));
    }
    model.freeze_base();
    let ctx = model.context();
    let tw = adapter_windows(train, &resolve_actions(regime, Phase::Train, train, planner)?, ctx, false);
    let vw = adapter_windows(val, &resolve_actions(regime, Phase::Train, val, planner)?, ctx, true);
    train_windows(model, &tw, &vw, config)
}

/// Insert-style inputs for one document: `<bos>`, then `a + V` before the
/// tokens of each sentence. Action-token targets are weighted 1 only when
/// `train_actions` is set.
pub fn insert_windows_for(doc: &LmDocument, actions: &[ActionId], text_vocab: usize, train_actions: bool, context: usize, sliding: bool) -> Vec<Window> {
    let mut ids = vec![BOS as usize];
    ids.extend(insert_style_sequence(&doc.sentences(), actions, text_vocab));
    let (inputs, targets) = (&ids[..ids.len() - 1], &ids[1..]);
    let weights: Vec<f32> =
        targets.iter().map(|&t| if t >= text_vocab && !train_actions { 0.0 } else { 1.0 }).collect();
    if sliding {
        sliding_windows(inputs, targets, &weights, None, context)
    } else {
        chunk_windows(inputs, targets, &weights, None, context)
    }
}

/// Full-parameter finetuning of an insert-style model. `External` inserts
/// planner actions and trains on text tokens only; `Internal` inserts
/// oracle actions and also trains on the action tokens.
pub fn finetune_insert(
    model: &mut LanguageModel<f32>,
    locus: Locus,
    train: &[LmDocument],
    val: &[LmDocument],
    planner: Option<&Planner<f32>>,
    config: &LmTrainConfig,
) -> Result<LmTrainReport> {
    if model.action_tokens() == 0 {
        return Err(invalid("insert style needs a vocabulary extended with action tokens"));
    }
    let regime = match locus {
        Locus::External => Regime::PredictedPa,
        Locus::Internal => Regime::Oracle,
    };
    model.regime = Some(RegimeSpec { regime, style: Style::Insert, locus });
    model.unfreeze_all();
    let (v, ctx) = (model.text_vocab(), model.context());
    let build = |docs: &[LmDocument], sliding: bool, train_actions: bool| -> Result<Vec<Window>> {
        let acts = resolve_actions(regime, Phase::Train, docs, planner)?;
        Ok(docs
            .iter()
            .zip(acts)
            .flat_map(|(d, a)| insert_windows_for(d, &a.expect("conditioned regime"), v, train_actions, ctx, sliding))
            .collect())
    };
    let tw = build(train, false, locus == Locus::Internal)?;
    let vw = build(val, true, false)?;
    train_windows(model, &tw, &vw, config)
}

/// Incremental decoder with a key/value cache. Positions are counted from
/// the last [`Decoder::reset`].
pub struct Decoder<'m, S: Scalar> {
    model: &'m LanguageModel<S>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

/// Per-step adapter input.
#[derive(Clone, Copy, Debug)]
pub enum StepCond<'a> {
    None,
    Action(ActionId),
    Perturbed(ActionId, &'a [f32]),
}

fn vec_mat<S: Scalar>(x: &[S], w: &Tensor<S>, transposed: bool, out: &mut [S]) {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let m = MatRef::new(w.data(), r, c);
    let m = if transposed { m.t() } else { m };
    gemm(MatRef::new(x, 1, x.len()), m, S::zero(), out);
}

impl<'m, S: Scalar> Decoder<'m, S> {
    pub fn new(model: &'m LanguageModel<S>) -> Self {
        let n = model.config.n_layers;
        Self { model, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize, cond: StepCond<'_>) -> Result<Vec<S>> {
        let m = self.model;
        let (d, h) = (m.config.d_model, m.config.n_heads);
        if self.len >= m.config.context {
            return Err(invalid("decoder context is full; reset and replay a shorter window"));
        }
        if token >= m.config.vocab_size {
            return Err(Error::Shape { op: "decoder token", left: vec![m.config.vocab_size], right: vec![token] });
        }
        let st = &m.store;
        let mut x: Vec<S> = st.value(m.tok).row(token).iter().zip(st.value(m.pos).row(self.len)).map(|(&a, &b)| a + b).collect();
        let dh = d / h;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut qkv = vec![S::zero(); 3 * d];
        let mut ctx = vec![S::zero(); d];
        let mut proj = vec![S::zero(); d];
        let mut ff = vec![S::zero(); 4 * d];
        for (l, block) in m.blocks.iter().enumerate() {
            let hn = norm_row(&x, st.value(block.ln1.gain).data(), st.value(block.ln1.bias).data());
            vec_mat(&hn, st.value(block.qkv_w), false, &mut qkv);
            add_in(&mut qkv, st.value(block.qkv_b).data());
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let t = self.len + 1;
            for hh in 0..h {
                let q = &qkv[hh * dh..(hh + 1) * dh];
                let mut scores: Vec<S> = (0..t)
                    .map(|j| {
                        let k = &self.keys[l][j * d + hh * dh..j * d + (hh + 1) * dh];
                        q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                let c = &mut ctx[hh * dh..(hh + 1) * dh];
                c.iter_mut().for_each(|v| *v = S::zero());
                for (j, &p) in scores.iter().enumerate() {
                    let v = &self.values[l][j * d + hh * dh..j * d + (hh + 1) * dh];
                    for (o, &vv) in c.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            if let Some(a) = m.adapter.iter().find(|a| a.layer == l) {
                let (id, noise) = match cond {
                    StepCond::None => (None, None),
                    StepCond::Action(id) => (Some(id), None),
                    StepCond::Perturbed(id, n) => (Some(id), Some(n)),
                };
                if let Some(id) = id {
                    let table = st.value(a.e_a);
                    if id >= table.rows() {
                        return Err(Error::UnknownAction { id, k: table.rows() });
                    }
                    let mut e = table.row(id).to_vec();
                    if let Some(n) = noise {
                        e.iter_mut().zip(n).for_each(|(v, &z)| *v += S::from_f64_lossy(z as f64));
                    }
                    let mut r = vec![S::zero(); d];
                    vec_mat(&e, st.value(a.w_a), true, &mut r);
                    add_in(&mut ctx, &r);
                }
            }
            vec_mat(&ctx, st.value(block.out_w), false, &mut proj);
            add_in(&mut proj, st.value(block.out_b).data());
            add_in(&mut x, &proj);
            let hn = norm_row(&x, st.value(block.ln2.gain).data(), st.value(block.ln2.bias).data());
            vec_mat(&hn, st.value(block.ff1_w), false, &mut ff);
            add_in(&mut ff, st.value(block.ff1_b).data());
            ff.iter_mut().for_each(|v| *v = gelu_scalar(*v));
            vec_mat(&ff, st.value(block.ff2_w), false, &mut proj);
            add_in(&mut proj, st.value(block.ff2_b).data());
            add_in(&mut x, &proj);
        }
        self.len += 1;
        let hn = norm_row(&x, st.value(m.ln_f.gain).data(), st.value(m.ln_f.bias).data());
        let mut logits = vec![S::zero(); m.config.vocab_size];
        vec_mat(&hn, st.value(m.head_w), true, &mut logits);
        add_in(&mut logits, st.value(m.head_b).data());
        Ok(logits)
    }
}

fn norm_row<S: Scalar>(x: &[S], g: &[S], b: &[S]) -> Vec<S> {
    let (xhat, _) = layer_norm_rows(x, x.len());
    xhat.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b).collect()
}

fn add_in<S: Scalar>(a: &mut [S], b: &[S]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

/// Reference full-sequence forward without the tape, used to cross-check
/// the decoder against batched attention.
pub fn reference_logits<S: Scalar>(model: &LanguageModel<S>, tokens: &[usize], actions: Option<&[ActionId]>) -> Vec<Vec<S>> {
    let (d, t) = (model.config.d_model, tokens.len());
    let st = &model.store;
    let mut x = vec![S::zero(); t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(st.value(model.tok).row(tok)).zip(st.value(model.pos).row(i)) {
            *o = a + b;
        }
    }
    let spec = AttnSpec { batch: 1, seq: t, heads: model.config.n_heads, causal: true, lens: None };
    let rows = |buf: &[S], w: &Tensor<S>, b: &[S], out_cols: usize| -> Vec<S> {
        let mut out = vec![S::zero(); t * out_cols];
        gemm(MatRef::new(buf, t, buf.len() / t), MatRef::new(w.data(), w.shape()[0], w.shape()[1]), S::zero(), &mut out);
        out.chunks_mut(out_cols).for_each(|r| add_in(r, b));
        out
    };
    let norm_all = |buf: &[S], n: &Norm| -> Vec<S> {
        buf.chunks(d).flat_map(|r| norm_row(r, st.value(n.gain).data(), st.value(n.bias).data())).collect()
    };
    for (l, block) in model.blocks.iter().enumerate() {
        let h = norm_all(&x, &block.ln1);
        let qkv = rows(&h, st.value(block.qkv_w), st.value(block.qkv_b).data(), 3 * d);
        let (mut ctx, _) = attention_forward(&qkv, d, &spec);
        if let (Some(a), Some(acts)) = (model.adapter.iter().find(|a| a.layer == l), actions) {
            for (i, &id) in acts.iter().enumerate() {
                let mut r = vec![S::zero(); d];
                vec_mat(st.value(a.e_a).row(id), st.value(a.w_a), true, &mut r);
                add_in(&mut ctx[i * d..(i + 1) * d], &r);
            }
        }
        let p = rows(&ctx, st.value(block.out_w), st.value(block.out_b).data(), d);
        add_in(&mut x, &p);
        let h = norm_all(&x, &block.ln2);
        let mut f = rows(&h, st.value(block.ff1_w), st.value(block.ff1_b).data(), 4 * d);
        f.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let p = rows(&f, st.value(block.ff2_w), st.value(block.ff2_b).data(), d);
        add_in(&mut x, &p);
    }
    let h = norm_all(&x, &model.ln_f);
    h.chunks(d)
        .map(|r| {
            let mut out = vec![S::zero(); model.config.vocab_size];
            vec_mat(r, st.value(model.head_w), true, &mut out);
            add_in(&mut out, st.value(model.head_b).data());
            out
        })
        .collect()
}
