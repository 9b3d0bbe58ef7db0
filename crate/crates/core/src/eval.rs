//! Quantitative evaluation: perplexity, ROUGE-2, action-sequence edit
//! distance, the HMM critic behind latent perplexity, and the per-step
//! action scans.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actions::{ActionId, ActionSet};
use crate::corpus::{ends_sentence, TokenId, Vocabulary};
use crate::encoder::Encoder;
use crate::error::{invalid, Error, Result};
use crate::generation::{generate, teacher_force, GenerationConfig, GenerationMode, GenerationRecord, Generator, Planning, Prefix};
use crate::lm::{
    adapter_windows, insert_windows_for, perplexity_of, resolve_actions, window_nll, LanguageModel, LmDocument, Locus, Phase,
    Regime, Style, Window,
};
use crate::planner::{Planner, PlannerMetrics};
use crate::scalar::Scalar;

const EVAL_BATCH: usize = 32;

/// `exp` of the mean negative log of per-token probabilities.
pub fn perplexity_from_probs(probs: &[f64]) -> f64 {
    (-probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64).exp()
}

/// Sliding-window perplexity of adapter-style (or unconditioned) documents.
pub fn perplexity<S: Scalar>(model: &LanguageModel<S>, docs: &[LmDocument], actions: &[Option<Vec<ActionId>>]) -> Result<f64> {
    if docs.len() != actions.len() {
        return Err(Error::Shape { op: "perplexity", left: vec![docs.len()], right: vec![actions.len()] });
    }
    Ok(perplexity_of(&window_nll(model, &adapter_windows(docs, actions, model.context(), true), EVAL_BATCH)?))
}

/// Text-token perplexity of insert-style documents with the given actions
/// inserted; action positions carry no loss.
pub fn insert_perplexity<S: Scalar>(model: &LanguageModel<S>, docs: &[LmDocument], actions: &[Vec<ActionId>]) -> Result<f64> {
    let windows: Vec<Window> = docs
        .iter()
        .zip(actions)
        .flat_map(|(d, a)| insert_windows_for(d, a, model.text_vocab(), false, model.context(), true))
        .collect();
    Ok(perplexity_of(&window_nll(model, &windows, EVAL_BATCH)?))
}

/// Perplexity under the regime the model was trained for. Internal insert
/// models choose their own action tokens greedily before each sentence.
pub fn regime_perplexity(g: &Generator<'_>, docs: &[LmDocument], planner: Option<&Planner<f32>>) -> Result<f64> {
    let model = g.model;
    let Some(spec) = model.regime else {
        return perplexity(model, docs, &vec![None; docs.len()]);
    };
    match (spec.style, spec.locus) {
        (Style::Adapter, _) => perplexity(model, docs, &resolve_actions(spec.regime, Phase::Eval, docs, planner)?),
        (Style::Insert, Locus::External) => {
            let acts = resolve_actions(Regime::PredictedPa, Phase::Eval, docs, planner)?;
            insert_perplexity(model, docs, &acts.into_iter().map(|a| a.expect("planned")).collect::<Vec<_>>())
        }
        (Style::Insert, Locus::Internal) => {
            let (mut nll, mut n) = (0.0, 0usize);
            for d in docs {
                let rec = teacher_force(g, &Planning::Internal, &d.id, &d.sentences())?;
                nll += rec.token_nll.iter().sum::<f64>();
                n += rec.token_nll.len();
            }
            Ok((nll / n as f64).exp())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rouge2 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn bigram_counts<T: Eq + Hash>(xs: &[T]) -> HashMap<(&T, &T), usize> {
    let mut m = HashMap::new();
    for w in xs.windows(2) {
        *m.entry((&w[0], &w[1])).or_insert(0) += 1;
    }
    m
}

/// Clipped bigram overlap between a reference and a hypothesis.
pub fn rouge2<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> Rouge2 {
    let (r, h) = (bigram_counts(reference), bigram_counts(hypothesis));
    let overlap: usize = h.iter().map(|(b, &c)| c.min(r.get(b).copied().unwrap_or(0))).sum();
    let (nr, nh) = (reference.len().saturating_sub(1), hypothesis.len().saturating_sub(1));
    let precision = if nh == 0 { 0.0 } else { overlap as f64 / nh as f64 };
    let recall = if nr == 0 { 0.0 } else { overlap as f64 / nr as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Rouge2 { precision, recall, f1 }
}

pub fn rouge2_f1<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> f64 {
    rouge2(reference, hypothesis).f1
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance rescaled to a base generation length.
pub fn normalized_edit(real: &[ActionId], generated: &[ActionId], base_len: usize, generated_len: usize) -> f64 {
    levenshtein(real, generated) as f64 * base_len as f64 / generated_len.max(1) as f64
}

/// Splits lowercased token text into sentences with the corpus rule,
/// applied incrementally as during decoding.
pub fn token_sentences(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        cur.push(t);
        if ends_sentence(&vocab.decode(&cur)) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Nearest action of every sentence of a token stream, the trailing partial
/// sentence included.
pub fn token_actions(tokens: &[TokenId], vocab: &Vocabulary, encoder: &Encoder, set: &ActionSet<f32>) -> Vec<ActionId> {
    token_sentences(tokens, vocab).iter().map(|s| set.assign(encoder.embed_sentence(&vocab.decode(s)).as_slice())).collect()
}

fn log_sum_exp<S: Scalar>(xs: impl Iterator<Item = S> + Clone) -> S {
    let max = xs.clone().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<S>().ln()
}

/// Discrete HMM over action symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmCritic<S = f64> {
    pub n: usize,
    pub k: usize,
    pub initial: Vec<S>,
    /// Row-major `n x n`.
    pub transition: Vec<S>,
    /// Row-major `n x k`.
    pub emission: Vec<S>,
}

impl<S: Scalar> HmmCritic<S> {
    pub fn new(n: usize, k: usize, initial: Vec<S>, transition: Vec<S>, emission: Vec<S>) -> Result<Self> {
        let c = Self { n, k, initial, transition, emission };
        c.validate(1e-6)?;
        Ok(c)
    }

    /// Checks shapes and that every distribution sums to one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (n, k) = (self.n, self.k);
        if n == 0 || k == 0 || self.initial.len() != n || self.transition.len() != n * n || self.emission.len() != n * k {
            return Err(invalid("hmm shapes do not match n and k"));
        }
        let rows = std::iter::once(&self.initial[..]).chain(self.transition.chunks(n)).chain(self.emission.chunks(k));
        for r in rows {
            let sum: f64 = r.iter().map(|v| v.as_f64()).sum();
            if r.iter().any(|v| v.as_f64() < 0.0) || (sum - 1.0).abs() > tol {
                return Err(invalid("hmm rows must be probability distributions"));
            }
        }
        Ok(())
    }

    /// Random stochastic parameters, each row drawn from a flat Dirichlet.
    pub fn random(n: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = |len: usize| -> Vec<S> {
            let g: Vec<f64> = (0..len).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = g.iter().sum();
            g.iter().map(|v| S::from_f64_lossy(v / s)).collect()
        };
        let initial = row(n);
        let transition = (0..n).flat_map(|_| row(n)).collect();
        let emission = (0..n).flat_map(|_| row(k)).collect();
        Self { n, k, initial, transition, emission }
    }

    fn check_symbols(&self, seq: &[ActionId]) -> Result<()> {
        match seq.iter().find(|&&a| a >= self.k) {
            Some(&id) => Err(Error::UnknownAction { id, k: self.k }),
            None => Ok(()),
        }
    }

    /// Log-space forward variables, `T x n`.
    pub fn forward_log(&self, seq: &[ActionId]) -> Result<Vec<Vec<S>>> {
        self.check_symbols(seq)?;
        let n = self.n;
        let lt: Vec<S> = self.transition.iter().map(|v| v.ln()).collect();
        let le = |i: usize, o: usize| self.emission[i * self.k + o].ln();
        let mut alpha: Vec<Vec<S>> = Vec::with_capacity(seq.len());
        for (t, &o) in seq.iter().enumerate() {
            let row: Vec<S> = if t == 0 {
                (0..n).map(|i| self.initial[i].ln() + le(i, o)).collect()
            } else {
                let prev = &alpha[t - 1];
                (0..n).map(|j| log_sum_exp((0..n).map(|i| prev[i] + lt[i * n + j])) + le(j, o)).collect()
            };
            alpha.push(row);
        }
        Ok(alpha)
    }

    fn backward_log(&self, seq: &[ActionId]) -> Vec<Vec<S>> {
        let n = self.n;
        let lt: Vec<S> = self.transition.iter().map(|v| v.ln()).collect();
        let mut beta = vec![vec![S::zero(); n]; seq.len()];
        for t in (0..seq.len().saturating_sub(1)).rev() {
            let o = seq[t + 1];
            for i in 0..n {
                beta[t][i] = log_sum_exp((0..n).map(|j| lt[i * n + j] + self.emission[j * self.k + o].ln() + beta[t + 1][j]));
            }
        }
        beta
    }

    /// `log p(seq)`; zero for the empty sequence.
    pub fn log_likelihood(&self, seq: &[ActionId]) -> Result<S> {
        let alpha = self.forward_log(seq)?;
        Ok(alpha.last().map_or(S::zero(), |a| log_sum_exp(a.iter().copied())))
    }

    /// `exp(-log p(seq) / T)`, absent for the empty sequence.
    pub fn latent_perplexity(&self, seq: &[ActionId]) -> Result<Option<f64>> {
        if seq.is_empty() {
            return Ok(None);
        }
        Ok(Some((-self.log_likelihood(seq)?.as_f64() / seq.len() as f64).exp()))
    }
}

/// Baum-Welch training in log space. Returns the critic and the training
/// log-likelihood before each M-step.
pub fn hmm_fit<S: Scalar>(seqs: &[Vec<ActionId>], n: usize, k: usize, seed: u64, max_iters: usize) -> Result<(HmmCritic<S>, Vec<f64>)> {
    let seqs: Vec<&Vec<ActionId>> = seqs.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(invalid("hmm_fit needs at least one nonempty sequence"));
    }
    if n == 0 || k == 0 {
        return Err(invalid("hmm_fit needs n >= 1 and k >= 1"));
    }
    let symbols: usize = seqs.iter().map(|s| s.len()).sum();
    let mut hmm = HmmCritic::<S>::random(n, k, seed);
    let smooth = 1e-6;
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let mut pi = vec![0.0f64; n];
        let mut trans = vec![0.0f64; n * n];
        let mut emit = vec![0.0f64; n * k];
        let mut ll = 0.0f64;
        let lt: Vec<S> = hmm.transition.iter().map(|v| v.ln()).collect();
        for seq in &seqs {
            let alpha = hmm.forward_log(seq)?;
            let beta = hmm.backward_log(seq);
            let z = log_sum_exp(alpha[seq.len() - 1].iter().copied());
            ll += z.as_f64();
            for t in 0..seq.len() {
                for i in 0..n {
                    let g = (alpha[t][i] + beta[t][i] - z).exp().as_f64();
                    if t == 0 {
                        pi[i] += g;
                    }
                    emit[i * k + seq[t]] += g;
                }
                if t + 1 < seq.len() {
                    let o = seq[t + 1];
                    for i in 0..n {
                        for j in 0..n {
                            let x = alpha[t][i] + lt[i * n + j] + hmm.emission[j * k + o].ln() + beta[t + 1][j] - z;
                            trans[i * n + j] += x.exp().as_f64();
                        }
                    }
                }
            }
        }
        trace.push(ll);
        let normalize = |v: &mut [f64], add: f64| {
            v.iter_mut().for_each(|x| *x += add);
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        };
        normalize(&mut pi, 0.0);
        trans.chunks_mut(n).for_each(|r| normalize(r, smooth));
        emit.chunks_mut(k).for_each(|r| normalize(r, smooth));
        let cast = |v: Vec<f64>| v.into_iter().map(S::from_f64_lossy).collect();
        hmm = HmmCritic { n, k, initial: cast(pi), transition: cast(trans), emission: cast(emit) };
        if trace.len() >= 2 {
            let gain = trace[trace.len() - 1] - trace[trace.len() - 2];
            if gain < 1e-6 * symbols as f64 {
                break;
            }
        }
    }
    Ok((hmm, trace))
}

/// Per-sentence mean token NLL of sentence `j` under each variant, with
/// earlier sentences conditioned on their oracle actions.
fn sentence_variant_nll(
    model: &LanguageModel<f32>,
    doc: &LmDocument,
    j: usize,
    variants: &[(ActionId, Option<Vec<f32>>)],
) -> Result<Option<Vec<f64>>> {
    let ids = doc.input_ids();
    let positions: Vec<usize> = (0..doc.tokens.len()).filter(|&q| doc.sentence_of[q] == j).collect();
    let (Some(&s), Some(&e)) = (positions.first(), positions.last()) else { return Ok(None) };
    let end = e + 1;
    let start = end.saturating_sub(model.context());
    let dim = model.adapter_config().map_or(0, |a| a.action_dim);
    let windows: Vec<Window> = variants
        .iter()
        .map(|(a, noise)| {
            let actions: Vec<ActionId> =
                (start..end).map(|q| if doc.sentence_of[q] < j { doc.oracle[doc.sentence_of[q]] } else { *a }).collect();
            let noise = noise.as_ref().map(|z| {
                (start..end).flat_map(|q| if q >= s { z.clone() } else { vec![0.0; dim] }).collect::<Vec<f32>>()
            });
            Window {
                inputs: ids[start..end].to_vec(),
                targets: ids[start + 1..end + 1].to_vec(),
                weights: (start..end).map(|q| if q >= s { 1.0 } else { 0.0 }).collect(),
                actions: Some(actions),
                noise,
            }
        })
        .collect();
    let parts = window_nll(model, &windows, variants.len())?;
    Ok(Some(parts.iter().map(|(nll, w)| nll / w).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleScan {
    pub article_id: String,
    pub best_ppl: f64,
    pub oracle_ppl: f64,
    pub mean_oracle_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScan {
    /// PPL when every sentence uses its `k`-th best action, `k = 1..=K`.
    pub curve: Vec<f64>,
    pub oracle_ppl: f64,
    /// 1-based rank of the oracle action at every scored sentence.
    pub oracle_ranks: Vec<usize>,
    pub mean_oracle_rank: f64,
    /// Rank whose curve value is nearest the oracle PPL.
    pub equivalent_rank: usize,
    pub articles: Vec<ArticleScan>,
}

fn curve_from(sorted: &[Vec<f64>]) -> Vec<f64> {
    let k = sorted.first().map_or(0, Vec::len);
    (0..k).map(|r| (sorted.iter().map(|s| s[r]).sum::<f64>() / sorted.len() as f64).exp()).collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Scores every action at every sentence of `docs` and ranks them.
pub fn oracle_scan(model: &LanguageModel<f32>, docs: &[LmDocument]) -> Result<OracleScan> {
    let k = model.adapter_config().ok_or_else(|| invalid("oracle scan needs an adapter model"))?.k;
    let variants: Vec<(ActionId, Option<Vec<f32>>)> = (0..k).map(|a| (a, None)).collect();
    let (mut all_sorted, mut all_oracle, mut ranks, mut articles) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for doc in docs {
        let (mut best, mut oracle, mut doc_ranks) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..doc.oracle.len() {
            let Some(nll) = sentence_variant_nll(model, doc, j, &variants)? else { continue };
            let o = nll[doc.oracle[j]];
            doc_ranks.push(1 + nll.iter().filter(|&&x| x < o).count());
            let s = sorted(nll);
            best.push(s[0]);
            oracle.push(o);
            all_sorted.push(s);
        }
        if oracle.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        articles.push(ArticleScan {
            article_id: doc.id.clone(),
            best_ppl: mean(&best).exp(),
            oracle_ppl: mean(&oracle).exp(),
            mean_oracle_rank: doc_ranks.iter().sum::<usize>() as f64 / doc_ranks.len() as f64,
        });
        all_oracle.extend(oracle);
        ranks.extend(doc_ranks);
    }
    if ranks.is_empty() {
        return Err(invalid("oracle scan found no sentences to score"));
    }
    let curve = curve_from(&all_sorted);
    let oracle_ppl = (all_oracle.iter().sum::<f64>() / all_oracle.len() as f64).exp();
    let equivalent_rank = 1 + (0..curve.len())
        .min_by(|&a, &b| (curve[a] - oracle_ppl).abs().total_cmp(&(curve[b] - oracle_ppl).abs()))
        .unwrap_or(0);
    Ok(OracleScan {
        mean_oracle_rank: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
        curve,
        oracle_ppl,
        oracle_ranks: ranks,
        equivalent_rank,
        articles,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScan {
    pub sigma: f64,
    /// PPL when every sentence uses its `k`-th best perturbation.
    pub curve: Vec<f64>,
}

/// Population standard deviation of every adapter table entry.
pub fn adapter_embedding_std(model: &LanguageModel<f32>) -> f64 {
    let vals: Vec<f64> = model.adapter_tables().iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Like [`oracle_scan`], but the `K` candidates at each sentence are
/// Gaussian perturbations of the oracle action embedding.
pub fn noise_scan(model: &LanguageModel<f32>, docs: &[LmDocument], seed: u64, sigma: Option<f64>) -> Result<NoiseScan> {
    let cfg = model.adapter_config().ok_or_else(|| invalid("noise scan needs an adapter model"))?;
    let (k, dim) = (cfg.k, cfg.action_dim);
    let sigma = sigma.unwrap_or_else(|| adapter_embedding_std(model));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_sorted = Vec::new();
    for doc in docs {
        for j in 0..doc.oracle.len() {
            let variants: Vec<(ActionId, Option<Vec<f32>>)> = (0..k)
                .map(|_| {
                    let z = (0..dim).map(|_| (sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)) as f32).collect();
                    (doc.oracle[j], Some(z))
                })
                .collect();
            if let Some(nll) = sentence_variant_nll(model, doc, j, &variants)? {
                all_sorted.push(sorted(nll));
            }
        }
    }
    if all_sorted.is_empty() {
        return Err(invalid("noise scan found no sentences to score"));
    }
    Ok(NoiseScan { sigma, curve: curve_from(&all_sorted) })
}

/// `rank,ppl` rows, ranks starting at 1.
pub fn write_curve_csv(curve: &[f64], w: &mut impl Write) -> Result<()> {
    writeln!(w, "rank,ppl")?;
    for (i, p) in curve.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, p)?;
    }
    Ok(())
}

/// Aggregates of conditional generation at each continuation length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub rouge2: BTreeMap<usize, f64>,
    pub rouge2_mean: f64,
    pub edit: BTreeMap<usize, f64>,
    pub edit_mean: f64,
    pub latent_ppl: Option<f64>,
    pub plan_following_rate: Option<f64>,
}

fn mean_of(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Continues the first half of each document and compares the first `L`
/// generated tokens with the first `L` real ones for every `L` in
/// `lengths`. Edit distances are rescaled to the smallest length.
pub fn evaluate_generations(
    g: &Generator<'_>,
    planning: &Planning<'_>,
    docs: &[LmDocument],
    lengths: &[usize],
    config: &GenerationConfig,
    critic: Option<&HmmCritic<f64>>,
) -> Result<(GenerationMetrics, Vec<GenerationRecord>)> {
    let base = *lengths.iter().min().ok_or_else(|| invalid("empty lengths grid"))?;
    let longest = *lengths.iter().max().expect("nonempty");
    let mut records = Vec::with_capacity(docs.len());
    let mut rouge: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut edit: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let (mut latent, mut follow) = (Vec::new(), Vec::new());
    for (i, doc) in docs.iter().enumerate() {
        let sentences = doc.sentences();
        let half = sentences.len() / 2;
        let prefix = Prefix { article_id: doc.id.clone(), sentences: sentences[..half].to_vec() };
        let real: Vec<TokenId> = sentences[half..].iter().flatten().copied().collect();
        let cfg = GenerationConfig { max_tokens: longest, mode: GenerationMode::Conditional, seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        let rec = generate(g, planning, &prefix, &cfg)?;
        for &l in lengths {
            let hyp = &rec.text_tokens[..l.min(rec.text_tokens.len())];
            let refr = &real[..l.min(real.len())];
            rouge.entry(l).or_default().push(rouge2_f1(refr, hyp));
            let ra = token_actions(refr, g.vocab, g.encoder, g.actions);
            let ha = token_actions(hyp, g.vocab, g.encoder, g.actions);
            edit.entry(l).or_default().push(normalized_edit(&ra, &ha, base, l));
        }
        if let Some(c) = critic {
            if let Some(p) = c.latent_perplexity(&rec.realized_actions)? {
                latent.push(p);
            }
        }
        if let Some(r) = rec.plan_following_rate() {
            follow.push(r);
        }
        records.push(rec);
    }
    let avg = |m: BTreeMap<usize, Vec<f64>>| -> BTreeMap<usize, f64> {
        m.into_iter().map(|(l, v)| (l, mean_of(v).unwrap_or(0.0))).collect()
    };
    let (rouge2, edit) = (avg(rouge), avg(edit));
    Ok((
        GenerationMetrics {
            rouge2_mean: mean_of(rouge2.values().copied()).unwrap_or(0.0),
            edit_mean: mean_of(edit.values().copied()).unwrap_or(0.0),
            rouge2,
            edit,
            latent_ppl: mean_of(latent),
            plan_following_rate: mean_of(follow),
        },
        records,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub ppl: f64,
    pub generation: GenerationMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub lengths: Vec<usize>,
    pub regimes: BTreeMap<String, RegimeReport>,
    pub planner: Option<PlannerMetrics>,
    pub ground_truth_latent_ppl: Option<f64>,
}

impl EvalReport {
    /// Every reported number is finite.
    pub fn is_finite(&self) -> bool {
        let g = |m: &GenerationMetrics| {
            m.rouge2.values().chain(m.edit.values()).all(|v| v.is_finite())
                && m.rouge2_mean.is_finite()
                && m.edit_mean.is_finite()
                && m.latent_ppl.is_none_or(f64::is_finite)
                && m.plan_following_rate.is_none_or(f64::is_finite)
        };
        self.regimes.values().all(|r| r.ppl.is_finite() && g(&r.generation))
            && self.planner.is_none_or(|p| p.accuracy.is_finite() && p.average_rank.is_finite())
            && self.ground_truth_latent_ppl.is_none_or(f64::is_finite)
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
