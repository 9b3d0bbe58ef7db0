//! Independent reference implementations used as test oracles.

use planlm::eval::HmmCritic;
use planlm::matrix::{squared_distance, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Edit distance by the recursive definition, memoized per pair.
pub fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Option<usize>>, w: usize) -> usize {
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo, w)
        } else {
            1 + go(a, b, i + 1, j, memo, w).min(go(a, b, i, j + 1, memo, w)).min(go(a, b, i + 1, j + 1, memo, w))
        };
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len() + 1;
    go(a, b, 0, 0, &mut vec![None; (a.len() + 1) * w], w)
}

/// Every string of length `0..=max_len` over `0..alphabet`.
pub fn all_strings(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// `log p(seq)` by summing over every hidden path.
pub fn hmm_enumerate(h: &HmmCritic<f64>, seq: &[usize]) -> f64 {
    let (n, t) = (h.n, seq.len());
    let mut total = 0.0;
    for code in 0..n.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let s = c % n;
                c /= n;
                s
            })
            .collect();
        let mut p = h.initial[path[0]] * h.emission[path[0] * h.k + seq[0]];
        for i in 1..t {
            p *= h.transition[path[i - 1] * n + path[i]] * h.emission[path[i] * h.k + seq[i]];
        }
        total += p;
    }
    total.ln()
}

/// Hand-counted ROUGE-2 cases: (reference, hypothesis, precision, recall).
pub const ROUGE_FIXTURES: [(&str, &str, f64, f64); 20] = [
    ("a b c d", "a b c d", 1.0, 1.0),
    ("a b c d", "d c b a", 0.0, 0.0),
    ("a b", "a b c", 0.5, 1.0),
    ("a b c", "a b", 1.0, 0.5),
    ("a", "a", 0.0, 0.0),
    ("", "a b", 0.0, 0.0),
    ("a a a", "a a", 1.0, 0.5),
    ("a a", "a a a", 0.5, 1.0),
    ("a b a b", "a b", 1.0, 1.0 / 3.0),
    ("the cat sat on the mat", "the cat sat on a mat", 0.6, 0.6),
    ("the cat sat on the mat", "the mat", 1.0, 0.2),
    ("x y z", "y z x", 0.5, 0.5),
    ("a b c d e", "a b x d e", 0.5, 0.5),
    ("a b c d e f", "c d e", 1.0, 0.4),
    ("a b a b a b", "b a b a", 1.0, 0.6),
    ("a b c", "a c b", 0.0, 0.0),
    ("a b c a b c", "a b c", 1.0, 0.4),
    ("p q r s", "p q p q r s", 0.6, 1.0),
    ("a b", "b a", 0.0, 0.0),
    ("one two three four", "one two three four five six", 0.6, 1.0),
];

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn random_dataset(rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = rng.random_range(20..80);
    let d = rng.random_range(1..6);
    let data = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
    Matrix::new(n, d, data).unwrap()
}

/// Six well-separated Gaussian blobs of `per` points each.
pub fn blobs(per: usize, seed: u64) -> Matrix<f64> {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 20.0], [20.0, 5.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in centers {
        for _ in 0..per {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![c[0] + dx, c[1] + dy]);
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

/// Best inertia of plain Lloyd runs from uniformly chosen distinct points.
pub fn lloyd_oracle(data: &Matrix<f64>, k: usize, restarts: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.rows();
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut centers: Vec<Vec<f64>> = idx[..k].iter().map(|&i| data.row(i).to_vec()).collect();
        let mut assign = vec![usize::MAX; n];
        loop {
            let next: Vec<usize> = data
                .iter_rows()
                .map(|x| (0..k).min_by(|&a, &b| squared_distance(x, &centers[a]).total_cmp(&squared_distance(x, &centers[b]))).unwrap())
                .collect();
            if next == assign {
                break;
            }
            assign = next;
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&[f64]> = data.iter_rows().zip(&assign).filter(|(_, &a)| a == c).map(|(x, _)| x).collect();
                if !members.is_empty() {
                    for (d, v) in center.iter_mut().enumerate() {
                        *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
        }
        let total: f64 = data.iter_rows().zip(&assign).map(|(x, &a)| squared_distance(x, &centers[a])).sum();
        best = best.min(total);
    }
    best
}
