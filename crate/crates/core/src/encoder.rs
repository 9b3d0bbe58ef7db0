//! Frozen sentence encoder: hashed character n-gram counts followed by a
//! fixed Gaussian random projection and L2 normalization.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::ProcessedArticle;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub ngram_order: usize,
    pub hash_buckets: usize,
    pub projection_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 256, ngram_order: 3, hash_buckets: 1 << 18, projection_seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(invalid(format!("encoder dim must be >= 8, got {}", self.dim)));
        }
        if self.hash_buckets < self.dim {
            return Err(invalid("encoder hash_buckets must be >= dim"));
        }
        if self.ngram_order == 0 {
            return Err(invalid("encoder ngram_order must be >= 1"));
        }
        Ok(())
    }
}

/// Unit-norm sentence embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let d: f64 = self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum();
        d / (self.norm() * other.norm())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The encoder. Projection rows are generated on demand from
/// `(projection_seed, bucket)` and memoized; the full matrix is never built.
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    rows: Mutex<HashMap<usize, Arc<[f32]>>>,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self::new(self.config.clone()).expect("config already validated")
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, rows: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Vector returned for empty or whitespace-only text: the first basis vector.
    pub fn empty_vector(&self) -> EmbeddingVector {
        let mut v = vec![0.0; self.config.dim];
        v[0] = 1.0;
        EmbeddingVector(v)
    }

    /// Sparse hashed n-gram term frequencies, keyed by bucket.
    pub fn ngram_counts(&self, text: &str) -> BTreeMap<usize, u32> {
        let normalized: Vec<char> = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase().chars().collect();
        let mut counts = BTreeMap::new();
        let mut buf = String::new();
        for n in 1..=self.config.ngram_order {
            if normalized.len() < n {
                break;
            }
            for w in normalized.windows(n) {
                buf.clear();
                buf.push(char::from(b'0' + (n % 10) as u8));
                buf.push('\u{1f}');
                buf.extend(w.iter());
                let bucket = (fnv1a64(buf.as_bytes()) % self.config.hash_buckets as u64) as usize;
                *counts.entry(bucket).or_insert(0) += 1;
            }
        }
        counts
    }

    fn projection_row(&self, bucket: usize) -> Arc<[f32]> {
        let mut cache = self.rows.lock().expect("encoder cache poisoned");
        cache
            .entry(bucket)
            .or_insert_with(|| {
                let seed = splitmix64(self.config.projection_seed ^ splitmix64(bucket as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.config.dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>().into()
            })
            .clone()
    }

    pub fn embed_sentence(&self, text: &str) -> EmbeddingVector {
        if text.trim().is_empty() {
            return self.empty_vector();
        }
        let mut acc = vec![0.0f64; self.config.dim];
        for (bucket, count) in self.ngram_counts(text) {
            let row = self.projection_row(bucket);
            for (a, &r) in acc.iter_mut().zip(row.iter()) {
                *a += count as f64 * r as f64;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return self.empty_vector();
        }
        EmbeddingVector(acc.iter().map(|v| (v / norm) as f32).collect())
    }

    pub fn embed_many<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Matrix<f32> {
        let rows: Vec<Vec<f32>> = texts.into_iter().map(|t| self.embed_sentence(t).0).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.config.dim);
        }
        Matrix::from_rows(&rows).expect("uniform embedding width")
    }
}

/// Row provenance of an embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingIndex(pub Vec<(String, usize)>);

impl EmbeddingIndex {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for (id, j) in &self.0 {
            writeln!(w, "{id}\t{j}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut out = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let (id, j) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format { format: "embedding index", reason: format!("line {} lacks a tab", n + 1) })?;
            let j = j
                .trim()
                .parse()
                .map_err(|_| Error::Format { format: "embedding index", reason: format!("line {}: bad sentence index", n + 1) })?;
            out.push((id.to_string(), j));
        }
        Ok(Self(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Embeds every sentence of every article, in corpus order.
pub fn embed_corpus(articles: &[ProcessedArticle], encoder: &Encoder) -> (Matrix<f32>, EmbeddingIndex) {
    let mut index = Vec::new();
    let mut texts = Vec::new();
    for a in articles {
        for j in 0..a.sentences.len() {
            index.push((a.id.clone(), j));
            texts.push(a.sentence_text(j));
        }
    }
    (encoder.embed_many(texts), EmbeddingIndex(index))
}

/// Per-article embedding lookup over a corpus matrix, either produced by
/// [`embed_corpus`] or supplied externally with a matching index.
#[derive(Clone, Debug)]
pub struct ArticleEmbeddings {
    by_article: HashMap<String, Matrix<f32>>,
    dim: usize,
}

impl ArticleEmbeddings {
    pub fn from_matrix(matrix: &Matrix<f32>, index: &EmbeddingIndex) -> Result<Self> {
        if matrix.rows() != index.0.len() {
            return Err(Error::Shape { op: "embedding index", left: vec![matrix.rows()], right: vec![index.0.len()] });
        }
        let mut grouped: BTreeMap<&str, Vec<(usize, &[f32])>> = BTreeMap::new();
        for (row, (id, j)) in index.0.iter().enumerate() {
            grouped.entry(id.as_str()).or_default().push((*j, matrix.row(row)));
        }
        let mut by_article = HashMap::new();
        for (id, mut rows) in grouped {
            rows.sort_by_key(|r| r.0);
            if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
                return Err(Error::Format { format: "embedding index", reason: format!("article {id} has gaps") });
            }
            let rows: Vec<&[f32]> = rows.into_iter().map(|r| r.1).collect();
            by_article.insert(id.to_string(), Matrix::from_rows(&rows)?);
        }
        Ok(Self { by_article, dim: matrix.cols() })
    }

    pub fn compute(articles: &[ProcessedArticle], encoder: &Encoder) -> Self {
        let by_article = articles
            .iter()
            .map(|a| (a.id.clone(), encoder.embed_many(a.sentence_texts())))
            .collect();
        Self { by_article, dim: encoder.dim() }
    }

    pub fn get(&self, article_id: &str) -> Option<&Matrix<f32>> {
        self.by_article.get(article_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(seed: u64) -> Encoder {
        Encoder::new(EncoderConfig { dim: 64, projection_seed: seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = enc(1);
        let a = e.embed_sentence("The cat sat on the mat.");
        assert_eq!(a, enc(1).embed_sentence("The cat sat on the mat."));
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_maps_to_first_basis_vector() {
        let e = enc(1);
        let z = e.embed_sentence("   ");
        assert_eq!(z.0[0], 1.0);
        assert!(z.0[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_ngrams_raise_cosine() {
        let e = enc(3);
        let base = e.embed_sentence("the cat sat");
        let near = e.embed_sentence("the cat sits");
        let far = e.embed_sentence("quarterly earnings report");
        assert!(base.cosine(&near) > base.cosine(&far));
    }

    #[test]
    fn seed_changes_vectors_but_not_norms() {
        let (a, b) = (enc(1).embed_sentence("hello there"), enc(2).embed_sentence("hello there"));
        assert_ne!(a, b);
        assert!((b.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(Encoder::new(EncoderConfig { dim: 4, ..Default::default() }).is_err());
        assert!(Encoder::new(EncoderConfig { dim: 64, hash_buckets: 32, ..Default::default() }).is_err());
    }

    #[test]
    fn index_round_trip() {
        let idx = EmbeddingIndex(vec![("a".into(), 0), ("a".into(), 1), ("b".into(), 0)]);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a\t0\na\t1\nb\t0\n");
        assert_eq!(EmbeddingIndex::read_from(buf.as_slice()).unwrap(), idx);
    }
}
