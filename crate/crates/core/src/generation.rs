//! Sampling from a conditioned language model with the planner in the loop.
//!
//! Text is decoded token by token. Whenever the sentence splitter reports
//! that the running sentence is complete, the sentence is embedded, appended
//! to the planner context, and the next action is chosen before the model
//! sees the following position.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionId, ActionSet};
use crate::corpus::{ends_sentence, ProcessedArticle, TokenId, Vocabulary, BOS};
use crate::encoder::Encoder;
use crate::error::{invalid, Error, Result};
use crate::lm::{Decoder, LanguageModel, Locus, Regime, StepCond, Style};
use crate::planner::Planner;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Conditional,
    Unconditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Text tokens to generate; action tokens are not counted.
    pub max_tokens: usize,
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    pub mode: GenerationMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_tokens: 128, temperature: 1.0, top_k: 40, seed: 0, mode: GenerationMode::Unconditional }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be finite and non-negative"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be positive"));
        }
        Ok(())
    }
}

/// How the action of each sentence is chosen.
#[derive(Clone, Debug)]
pub enum Planning<'a> {
    /// No conditioning.
    None,
    /// The same action for every sentence.
    Fixed(ActionId),
    /// Re-plan at every boundary from the embeddings written so far.
    Planner(&'a Planner<f32>),
    /// Predetermined actions, one per sentence; the last repeats.
    Script(Vec<ActionId>),
    /// The model samples its own action tokens (internal insert style).
    Internal,
}

impl<'a> Planning<'a> {
    /// Planning implied by a model's training regime. Planner-driven regimes
    /// (including ORACLE, whose future actions are unknown at decode time)
    /// require `planner`.
    pub fn for_model(model: &LanguageModel<f32>, planner: Option<&'a Planner<f32>>) -> Result<Self> {
        let Some(spec) = model.regime else { return Ok(Planning::None) };
        if spec.style == Style::Insert && spec.locus == Locus::Internal {
            return Ok(Planning::Internal);
        }
        Ok(match spec.regime {
            Regime::None => Planning::None,
            Regime::Fixed => Planning::Fixed(0),
            r => Planning::Planner(planner.ok_or_else(|| Error::PlannerRequired(r.name().to_string()))?),
        })
    }
}

/// Complete sentences preceding the generated text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Prefix {
    pub article_id: String,
    pub sentences: Vec<Vec<TokenId>>,
}

impl Prefix {
    pub fn empty(article_id: impl Into<String>) -> Self {
        Self { article_id: article_id.into(), sentences: Vec::new() }
    }

    /// The first `n` sentences of a tokenized article.
    pub fn from_article(article: &ProcessedArticle, n: usize) -> Self {
        Self { article_id: article.id.clone(), sentences: article.sentences.iter().take(n).map(|s| s.token_ids.clone()).collect() }
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub article_id: String,
    /// Number of prefix text tokens.
    pub prefix_len: usize,
    pub text: String,
    /// Actions of the complete generated sentences, as planned.
    pub planned_actions: Vec<ActionId>,
    /// Nearest centroid of each complete generated sentence.
    pub realized_actions: Vec<ActionId>,
    /// Every emitted id, action tokens included.
    #[serde(skip)]
    pub token_ids: Vec<usize>,
    /// Emitted text tokens only.
    #[serde(skip)]
    pub text_tokens: Vec<TokenId>,
    /// Adapter action that conditioned the prediction of each text token.
    #[serde(skip)]
    pub conditioning: Vec<Option<ActionId>>,
    /// Sentence index of each text token.
    #[serde(skip)]
    pub sentence_of: Vec<usize>,
    /// Negative log-probability of each text token under the full softmax.
    #[serde(skip)]
    pub token_nll: Vec<f64>,
    #[serde(skip)]
    pub planner_calls: u64,
    /// Largest number of positions the decoder held at once.
    #[serde(skip)]
    pub max_positions: usize,
}

impl GenerationRecord {
    /// Fraction of complete sentences whose realized action equals the
    /// planned one; `None` when no sentence was completed.
    pub fn plan_following_rate(&self) -> Option<f64> {
        plan_following_rate(&self.planned_actions, &self.realized_actions)
    }
}

pub fn plan_following_rate(planned: &[ActionId], realized: &[ActionId]) -> Option<f64> {
    if planned.is_empty() {
        return None;
    }
    let hits = planned.iter().zip(realized).filter(|(a, b)| a == b).count();
    Some(hits as f64 / planned.len() as f64)
}

/// Read-only resources shared by all generations.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a LanguageModel<f32>,
    pub encoder: &'a Encoder,
    pub actions: &'a ActionSet<f32>,
    pub vocab: &'a Vocabulary,
}

struct Run<'a, 'g> {
    g: &'g Generator<'a>,
    planning: &'g Planning<'a>,
    decoder: Decoder<'a, f32>,
    history: Vec<(usize, Option<ActionId>)>,
    context: Vec<Vec<f32>>,
    sentences_planned: usize,
    max_positions: usize,
}

impl<'a, 'g> Run<'a, 'g> {
    fn feed(&mut self, token: usize, action: Option<ActionId>) -> Result<Vec<f32>> {
        let p = self.g.model.context();
        if self.decoder.len() >= p {
            self.decoder.reset();
            let keep = self.history.len().min(p - 1);
            let start = self.history.len() - keep;
            for i in start..self.history.len() {
                let (t, a) = self.history[i];
                self.decoder.step(t, cond(a))?;
            }
        }
        self.history.push((token, action));
        let logits = self.decoder.step(token, cond(action))?;
        self.max_positions = self.max_positions.max(self.decoder.len());
        Ok(logits)
    }

    /// Action for the next sentence, or `None` when unconditioned or when
    /// the model chooses it itself.
    fn plan(&mut self) -> Result<Option<ActionId>> {
        let j = self.sentences_planned;
        self.sentences_planned += 1;
        Ok(match self.planning {
            Planning::None | Planning::Internal => None,
            Planning::Fixed(a) => Some(*a),
            Planning::Script(s) => Some(*s.get(j).or(s.last()).ok_or_else(|| invalid("empty action script"))?),
            Planning::Planner(p) => {
                let rows: Vec<&[f32]> = self.context.iter().map(Vec::as_slice).collect();
                Some(p.predict(&rows)?)
            }
        })
    }

    fn finish_sentence(&mut self, tokens: &[TokenId]) -> ActionId {
        let z = self.g.encoder.embed_sentence(&self.g.vocab.decode(tokens));
        let a = self.g.actions.assign(z.as_slice());
        self.context.push(z.0);
        a
    }
}

fn cond(a: Option<ActionId>) -> StepCond<'static> {
    a.map_or(StepCond::None, StepCond::Action)
}

fn neg_log_prob(logits: &[f32], t: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
    let lse = max + logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
    lse - logits[t] as f64
}

/// Chooses the next id from logits restricted to `allowed`.
fn sample(logits: &[f32], allowed: impl Fn(usize) -> bool, config: &GenerationConfig, rng: &mut ChaCha8Rng) -> usize {
    let mut cand: Vec<(usize, f64)> = logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(i, &l)| (i, l as f64)).collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if config.temperature == 0.0 {
        return cand[0].0;
    }
    cand.truncate(config.top_k);
    let top = cand[0].1;
    let w: Vec<f64> = cand.iter().map(|&(_, l)| ((l - top) / config.temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (&(i, _), &wi) in cand.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    cand[cand.len() - 1].0
}

/// Generates a continuation of `prefix` (ignored in unconditional mode).
pub fn generate(g: &Generator<'_>, planning: &Planning<'_>, prefix: &Prefix, config: &GenerationConfig) -> Result<GenerationRecord> {
    config.validate()?;
    let prefix = match config.mode {
        GenerationMode::Conditional => prefix.clone(),
        GenerationMode::Unconditional => Prefix::empty(prefix.article_id.clone()),
    };
    run(g, planning, &prefix, config, None)
}

/// Feeds the given sentences instead of sampling, recording planned and
/// realized actions exactly as [`generate`] would. Self-chosen action
/// tokens are picked greedily.
pub fn teacher_force(g: &Generator<'_>, planning: &Planning<'_>, article_id: &str, sentences: &[Vec<TokenId>]) -> Result<GenerationRecord> {
    let tokens: Vec<TokenId> = sentences.iter().flatten().copied().collect();
    let config = GenerationConfig { max_tokens: tokens.len(), temperature: 0.0, mode: GenerationMode::Conditional, ..Default::default() };
    run(g, planning, &Prefix::empty(article_id), &config, Some(&tokens))
}

fn run(
    g: &Generator<'_>,
    planning: &Planning<'_>,
    prefix: &Prefix,
    config: &GenerationConfig,
    forced: Option<&[TokenId]>,
) -> Result<GenerationRecord> {
    let model = g.model;
    let v = model.text_vocab();
    let insert = model.action_tokens() > 0;
    if matches!(planning, Planning::Internal) && !insert {
        return Err(invalid("internal planning needs a model with action tokens"));
    }
    let max_id = match planning {
        Planning::Fixed(a) => Some(*a),
        Planning::Script(s) => s.iter().copied().max(),
        _ => None,
    };
    if let Some(id) = max_id.filter(|&id| id >= g.actions.k()) {
        return Err(Error::UnknownAction { id, k: g.actions.k() });
    }
    let calls_before = match planning {
        Planning::Planner(p) => p.invocations(),
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut r = Run { g, planning, decoder: Decoder::new(model), history: Vec::new(), context: Vec::new(), sentences_planned: 0, max_positions: 0 };
    let mut emitted: Vec<usize> = Vec::new();
    let pick_action = |logits: &[f32], rng: &mut ChaCha8Rng| sample(logits, |i| i >= v, config, rng) - v;

    let mut cur: Option<ActionId>;
    let mut logits;
    if insert {
        logits = r.feed(BOS as usize, None)?;
        for s in &prefix.sentences {
            let a = match r.plan()? {
                Some(a) => a,
                None => pick_action(&logits, &mut rng),
            };
            logits = r.feed(a + v, None)?;
            for &t in s {
                logits = r.feed(t as usize, None)?;
            }
            r.finish_sentence(s);
        }
        cur = None;
    } else {
        let mut acts = Vec::with_capacity(prefix.sentences.len());
        for s in &prefix.sentences {
            acts.push(r.plan()?);
            r.finish_sentence(s);
        }
        cur = r.plan()?;
        let mut input = BOS as usize;
        for (s, a) in prefix.sentences.iter().zip(&acts) {
            for &t in s {
                r.feed(input, *a)?;
                input = t as usize;
            }
        }
        logits = r.feed(input, cur)?;
    }

    let (mut planned, mut realized) = (Vec::new(), Vec::new());
    let (mut text_tokens, mut conditioning, mut sentence_of, mut token_nll) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut sentence: Vec<TokenId> = Vec::new();
    let mut at_start = true;
    while text_tokens.len() < config.max_tokens {
        if insert && at_start {
            let a = match r.plan()? {
                Some(a) => a,
                None => pick_action(&logits, &mut rng),
            };
            cur = Some(a);
            emitted.push(a + v);
            logits = r.feed(a + v, None)?;
        }
        at_start = false;
        let t = match forced {
            Some(ts) => ts[text_tokens.len()] as usize,
            None => sample(&logits, |i| i < v && i != BOS as usize, config, &mut rng),
        };
        token_nll.push(neg_log_prob(&logits, t));
        emitted.push(t);
        text_tokens.push(t as TokenId);
        sentence.push(t as TokenId);
        conditioning.push(cur);
        sentence_of.push(realized.len());
        let boundary = ends_sentence(&g.vocab.decode(&sentence));
        if boundary {
            realized.push(r.finish_sentence(&sentence));
            if let Some(a) = cur {
                planned.push(a);
            }
            sentence.clear();
            at_start = true;
        }
        if text_tokens.len() == config.max_tokens {
            break;
        }
        if boundary && !insert {
            cur = r.plan()?;
        }
        logits = r.feed(t, if insert { None } else { cur })?;
    }

    let planner_calls = match planning {
        Planning::Planner(p) => p.invocations() - calls_before,
        _ => 0,
    };
    Ok(GenerationRecord {
        article_id: prefix.article_id.clone(),
        prefix_len: prefix.num_tokens(),
        text: g.vocab.decode(&text_tokens),
        planned_actions: planned,
        realized_actions: realized,
        token_ids: emitted,
        text_tokens,
        conditioning,
        sentence_of,
        token_nll,
        planner_calls,
        max_positions: r.max_positions,
    })
}

/// Writes one JSON object per record.
pub fn write_generations(records: &[GenerationRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_generations(r: impl std::io::BufRead) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
