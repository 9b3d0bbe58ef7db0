//! Discrete writing actions: k-means centroids over sentence embeddings,
//! nearest-centroid assignment and per-article action sequences.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ProcessedArticle;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::scalar::Scalar;

pub type ActionId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Independent k-means++ runs; the lowest final inertia wins.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 64, seed: 0, max_iters: 300, restarts: 10 }
    }
}

/// Fitted action vocabulary. Row `a` of `centroids` is the embedding of action `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSet<S = f32> {
    pub centroids: Matrix<S>,
    pub inertia: f64,
    pub config: KMeansConfig,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl<S: Scalar> ActionSet<S> {
    pub fn from_centroids(centroids: Matrix<S>) -> Self {
        let k = centroids.rows();
        Self { centroids, inertia: 0.0, config: KMeansConfig { k, ..Default::default() }, inertia_trace: Vec::new(), iterations: 0 }
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lowest id.
    pub fn assign(&self, z: &[S]) -> ActionId {
        nearest(&self.centroids, z).0
    }

    pub fn centroid(&self, a: ActionId) -> &[S] {
        self.centroids.row(a)
    }
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest id.
pub fn assign_action<S: Scalar>(z: &[S], set: &ActionSet<S>) -> ActionId {
    set.assign(z)
}

fn nearest<S: Scalar>(centroids: &Matrix<S>, z: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(row, z);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init<S: Scalar>(data: &Matrix<S>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<S> {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter_rows().map(|x| squared_distance(x, data.row(chosen[0])).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a chosen center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, x) in data.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, data.row(next)).as_f64());
        }
    }
    let rows: Vec<&[S]> = chosen.iter().map(|&i| data.row(i)).collect();
    Matrix::from_rows(&rows).expect("uniform rows")
}

fn update_centroids<S: Scalar>(data: &Matrix<S>, assign: &mut [usize], k: usize) -> Matrix<S> {
    let d = data.cols();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (x, &c) in data.iter_rows().zip(assign.iter()) {
        counts[c] += 1;
        for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
            *s += v.as_f64();
        }
    }
    let mean_of = |sums: &[f64], counts: &[usize], c: usize| -> Vec<S> {
        sums[c * d..(c + 1) * d].iter().map(|&s| S::from_f64_lossy(s / counts[c] as f64)).collect()
    };
    let mut centroids = Matrix::zeros(k, d);
    for c in 0..k {
        if counts[c] > 0 {
            centroids.row_mut(c).copy_from_slice(&mean_of(&sums, &counts, c));
        }
    }
    // Empty clusters take the point farthest from its own centroid.
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor_point = data
            .iter_rows()
            .enumerate()
            .filter(|(i, _)| counts[assign[*i]] > 1)
            .map(|(i, x)| (i, squared_distance(x, centroids.row(assign[i])).as_f64()))
            .fold(None, |best: Option<(usize, f64)>, (i, dist)| match best {
                Some((_, bd)) if bd >= dist => best,
                _ => Some((i, dist)),
            });
        let Some((i, _)) = donor_point else { break };
        let donor = assign[i];
        for (s, &v) in sums[donor * d..(donor + 1) * d].iter_mut().zip(data.row(i)) {
            *s -= v.as_f64();
        }
        counts[donor] -= 1;
        centroids.row_mut(donor).copy_from_slice(&mean_of(&sums, &counts, donor));
        for (s, &v) in sums[empty * d..(empty + 1) * d].iter_mut().zip(data.row(i)) {
            *s = v.as_f64();
        }
        counts[empty] = 1;
        assign[i] = empty;
        centroids.row_mut(empty).copy_from_slice(data.row(i));
    }
    centroids
}

pub fn inertia<S: Scalar>(data: &Matrix<S>, centroids: &Matrix<S>, assign: &[usize]) -> f64 {
    data.iter_rows().zip(assign).map(|(x, &c)| squared_distance(x, centroids.row(c)).as_f64()).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached, repeated `restarts` times.
pub fn kmeans_fit<S: Scalar>(data: &Matrix<S>, config: &KMeansConfig) -> Result<ActionSet<S>> {
    let (n, k) = (data.rows(), config.k);
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    if data.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = lloyd_run(data, config, &mut rng);
    for _ in 1..config.restarts.max(1) {
        let run = lloyd_run(data, config, &mut rng);
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd_run<S: Scalar>(data: &Matrix<S>, config: &KMeansConfig, rng: &mut ChaCha8Rng) -> ActionSet<S> {
    let (n, k) = (data.rows(), config.k);
    let mut centroids = kmeans_pp_init(data, k, rng);
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        let next: Vec<usize> = data.iter_rows().map(|x| nearest(&centroids, x).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        centroids = update_centroids(data, &mut assign, k);
        let value = inertia(data, &centroids, &assign);
        if let Some(&prev) = trace.last() {
            debug_assert!(value <= prev * (1.0 + 1e-9) + 1e-12, "Lloyd iteration increased inertia: {prev} -> {value}");
        }
        trace.push(value);
        iterations += 1;
    }
    let final_inertia = trace.last().copied().unwrap_or_else(|| inertia(data, &centroids, &assign));
    ActionSet { centroids, inertia: final_inertia, config: config.clone(), inertia_trace: trace, iterations }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSequence {
    pub article_id: String,
    pub actions: Vec<ActionId>,
}

/// Embeds each sentence and assigns it to its nearest action.
pub fn extract_action_sequence(article: &ProcessedArticle, set: &ActionSet<f32>, encoder: &Encoder) -> ActionSequence {
    let actions = article.sentence_texts().into_iter().map(|t| set.assign(encoder.embed_sentence(t).as_slice())).collect();
    ActionSequence { article_id: article.id.clone(), actions }
}

/// Assigns every row of an embedding matrix.
pub fn assign_rows(embeddings: &Matrix<f32>, set: &ActionSet<f32>) -> Vec<ActionId> {
    embeddings.iter_rows().map(|z| set.assign(z)).collect()
}

/// `article_id<TAB>a_0 a_1 ...`, one line per article.
pub fn write_sequences(seqs: &[ActionSequence], w: &mut impl Write) -> Result<()> {
    for s in seqs {
        let ids: Vec<String> = s.actions.iter().map(ToString::to_string).collect();
        writeln!(w, "{}\t{}", s.article_id, ids.join(" "))?;
    }
    Ok(())
}

pub fn read_sequences(r: impl BufRead) -> Result<Vec<ActionSequence>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Format { format: "action sequences", reason: format!("line {}: {why}", n + 1) };
        let (id, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let actions = rest.split_whitespace().map(|t| t.parse().map_err(|_| bad("bad action id"))).collect::<Result<_>>()?;
        out.push(ActionSequence { article_id: id.to_string(), actions });
    }
    Ok(out)
}

pub fn save_sequences(seqs: &[ActionSequence], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sequences(seqs, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_sequences(path: &Path) -> Result<Vec<ActionSequence>> {
    read_sequences(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestSentence {
    pub distance: f64,
    pub article_id: String,
    pub sentence_index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub action: ActionId,
    pub size: usize,
    pub nearest: Vec<NearestSentence>,
    /// (action, size) of the ten largest clusters, largest first.
    pub largest: Vec<(ActionId, usize)>,
}

/// Sentences nearest to a centroid (ascending distance, ties by corpus
/// order) plus cluster sizes.
pub fn inspect_cluster(
    action: ActionId,
    articles: &[ProcessedArticle],
    embeddings: &Matrix<f32>,
    set: &ActionSet<f32>,
    top_n: usize,
) -> Result<ClusterReport> {
    if action >= set.k() {
        return Err(Error::UnknownAction { id: action, k: set.k() });
    }
    let mut rows = Vec::with_capacity(embeddings.rows());
    for a in articles {
        for j in 0..a.sentences.len() {
            rows.push((a.id.as_str(), j, a.sentence_text(j)));
        }
    }
    if rows.len() != embeddings.rows() {
        return Err(Error::Shape { op: "inspect_cluster", left: vec![rows.len()], right: vec![embeddings.rows()] });
    }
    let mut sizes: BTreeMap<ActionId, usize> = BTreeMap::new();
    let mut scored = Vec::with_capacity(rows.len());
    for (i, z) in embeddings.iter_rows().enumerate() {
        *sizes.entry(set.assign(z)).or_default() += 1;
        scored.push((squared_distance(z, set.centroid(action)).as_f64().sqrt(), i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = scored
        .into_iter()
        .take(top_n)
        .map(|(distance, i)| NearestSentence {
            distance,
            article_id: rows[i].0.to_string(),
            sentence_index: rows[i].1,
            text: rows[i].2.to_string(),
        })
        .collect();
    let mut largest: Vec<(ActionId, usize)> = sizes.iter().map(|(&a, &s)| (a, s)).collect();
    largest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    largest.truncate(10);
    Ok(ClusterReport { action, size: sizes.get(&action).copied().unwrap_or(0), nearest, largest })
}
