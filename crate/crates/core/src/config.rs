//! Run configuration: plain `key = value` text with typed fields, documented
//! defaults, and a stable digest.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{AdapterInit, Locus, Regime, Style};
use crate::planner::{HeadInit, PlannerVariant};

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse().map_err(|e| format!("{e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            }
        }
    )*};
}
enum_value!(Regime, Style, Locus, PlannerVariant, HeadInit, AdapterInit);

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a pipeline run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.render()), )*]
            }
        }
    };
}

run_config! {
    /// JSON-lines file or directory of `.txt` files; empty generates the
    /// synthetic biography corpus.
    corpus_path: String = String::new(),
    /// Base seed; every stage derives its own seed from it.
    seed: u64 = 0,
    vocab_size: usize = 5000,
    n_val: usize = 200,
    n_test: usize = 200,
    synth_articles: usize = 2000,
    synth_sentences: usize = 8,
    /// Probability of moving to the next section of the cycle.
    synth_cycle_prob: f64 = 0.5,
    embed_dim: usize = 256,
    ngram_order: usize = 3,
    hash_buckets: usize = 1 << 18,
    k: usize = 64,
    kmeans_max_iters: usize = 300,
    kmeans_restarts: usize = 10,
    planner_layers: usize = 2,
    planner_heads: usize = 4,
    planner_max_context: usize = 64,
    planner_variant: PlannerVariant = PlannerVariant::Transformer,
    planner_head_init: HeadInit = HeadInit::Centroids,
    planner_lr: f64 = 1e-4,
    planner_batch: usize = 32,
    planner_epochs: usize = 30,
    lm_dim: usize = 256,
    lm_layers: usize = 4,
    lm_heads: usize = 4,
    context: usize = 128,
    pretrain_lr: f64 = 1e-4,
    pretrain_epochs: usize = 10,
    /// `0` adapts the last half of the layers.
    adapter_layers: usize = 0,
    adapter_init: AdapterInit = AdapterInit::Centroids,
    finetune_lr: f64 = 1e-4,
    finetune_epochs: usize = 10,
    lm_batch: usize = 32,
    patience: usize = 3,
    regime: Regime = Regime::PredictedPa,
    style: Style = Style::Adapter,
    locus: Locus = Locus::External,
    gen_temperature: f64 = 1.0,
    gen_top_k: usize = 40,
    /// Continuation lengths compared against the real text.
    lengths: Vec<usize> = vec![32, 64, 128],
    /// Split scored by `evaluate`, `generate` and `scan-oracle`: `val` or `test`.
    eval_split: String = "test".to_string(),
    /// Articles of the evaluation split used for generation metrics; `0`
    /// uses all.
    eval_articles: usize = 0,
    critic_states: usize = 16,
    critic_iters: usize = 100,
    scan_articles: usize = 20,
    /// `k` values for `sweep-k`.
    sweep_ks: Vec<usize> = vec![16, 64, 256],
}

/// Keys that select what to run rather than how artifacts are made; they
/// do not enter any digest.
const SELECTION_KEYS: &[&str] = &["regime", "style", "locus"];

/// Pipeline stage whose artifacts a digest covers. Each stage's digest
/// spans its own keys and those of every stage upstream of it, so changing
/// `k` leaves the embeddings valid but invalidates the centroids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Ingest,
    Embed,
    Cluster,
    Planner,
    Pretrain,
    Finetune,
    /// Evaluation outputs; every non-selection key.
    Report,
}

const INGEST_KEYS: &[&str] = &["corpus_path", "seed", "vocab_size", "n_val", "n_test", "synth_articles", "synth_sentences", "synth_cycle_prob"];
const EMBED_KEYS: &[&str] = &["embed_dim", "ngram_order", "hash_buckets"];
const CLUSTER_KEYS: &[&str] = &["k", "kmeans_max_iters", "kmeans_restarts"];
const PLANNER_KEYS: &[&str] = &[
    "planner_layers",
    "planner_heads",
    "planner_max_context",
    "planner_variant",
    "planner_head_init",
    "planner_lr",
    "planner_batch",
    "planner_epochs",
    "patience",
];
const PRETRAIN_KEYS: &[&str] = &["lm_dim", "lm_layers", "lm_heads", "context", "pretrain_lr", "pretrain_epochs", "lm_batch", "patience"];
const FINETUNE_KEYS: &[&str] = &["adapter_layers", "adapter_init", "finetune_lr", "finetune_epochs"];

impl Stage {
    fn covers(self, key: &str) -> bool {
        let groups: &[&[&str]] = match self {
            Stage::Ingest => &[INGEST_KEYS],
            Stage::Embed => &[INGEST_KEYS, EMBED_KEYS],
            Stage::Cluster => &[INGEST_KEYS, EMBED_KEYS, CLUSTER_KEYS],
            Stage::Planner => &[INGEST_KEYS, EMBED_KEYS, CLUSTER_KEYS, PLANNER_KEYS],
            Stage::Pretrain => &[INGEST_KEYS, PRETRAIN_KEYS],
            Stage::Finetune => &[INGEST_KEYS, EMBED_KEYS, CLUSTER_KEYS, PLANNER_KEYS, PRETRAIN_KEYS, FINETUNE_KEYS],
            Stage::Report => return !SELECTION_KEYS.contains(&key),
        };
        groups.iter().any(|g| g.contains(&key))
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("synth_articles", self.synth_articles),
            ("synth_sentences", self.synth_sentences),
            ("embed_dim", self.embed_dim),
            ("k", self.k),
            ("kmeans_restarts", self.kmeans_restarts),
            ("planner_batch", self.planner_batch),
            ("lm_dim", self.lm_dim),
            ("lm_layers", self.lm_layers),
            ("context", self.context),
            ("lm_batch", self.lm_batch),
            ("gen_top_k", self.gen_top_k),
            ("critic_states", self.critic_states),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.synth_cycle_prob) {
            return Err(Error::Config("synth_cycle_prob must lie in [0, 1]".into()));
        }
        if !matches!(self.eval_split.as_str(), "val" | "test") {
            return Err(Error::Config("eval_split must be val or test".into()));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("lengths must be a nonempty list of positive integers".into()));
        }
        if self.adapter_layers > self.lm_layers {
            return Err(Error::Config("adapter_layers cannot exceed lm_layers".into()));
        }
        if self.locus == Locus::Internal && self.style != Style::Insert {
            return Err(Error::Config("locus = internal requires style = insert".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, in declaration order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text of every non-selection key.
    pub fn digest(&self) -> String {
        self.stage_digest(Stage::Report)
    }

    /// Hex SHA-256 of the canonical text of the keys `stage` depends on.
    pub fn stage_digest(&self, stage: Stage) -> String {
        let text: String =
            self.entries().into_iter().filter(|(k, _)| stage.covers(k)).map(|(k, v)| format!("{k} = {v}\n")).collect();
        hex_sha256(text.as_bytes())
    }

    /// Seed of a named stage, derived from the base seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let h = Sha256::digest(format!("{}:{stage}", self.seed).as_bytes());
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    pub fn adapter_layer_count(&self) -> usize {
        if self.adapter_layers == 0 {
            (self.lm_layers / 2).max(1)
        } else {
            self.adapter_layers
        }
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = RunConfig { k: 7, finetune_lr: 3e-3, lengths: vec![16, 32], regime: Regime::Oracle, ..Default::default() };
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("k = 3\nk = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("k = three"), Err(Error::Config(_))));
        assert!(RunConfig::parse("# comment\n\nk = 3 # trailing\nregime = predicted-oa").is_ok());
    }

    #[test]
    fn digest_ignores_selection_keys_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.regime = Regime::Fixed;
        assert_eq!(a.digest(), b.digest());
        b.k = 65;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn stage_digests_follow_dependencies() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.k = 65;
        assert_eq!(a.stage_digest(Stage::Embed), b.stage_digest(Stage::Embed));
        assert_eq!(a.stage_digest(Stage::Pretrain), b.stage_digest(Stage::Pretrain));
        assert_ne!(a.stage_digest(Stage::Cluster), b.stage_digest(Stage::Cluster));
        assert_ne!(a.stage_digest(Stage::Finetune), b.stage_digest(Stage::Finetune));
        b = a.clone();
        b.lengths = vec![8];
        assert_eq!(a.stage_digest(Stage::Finetune), b.stage_digest(Stage::Finetune));
        assert_ne!(a.digest(), b.digest());
        b = a.clone();
        b.seed = 1;
        assert_ne!(a.stage_digest(Stage::Ingest), b.stage_digest(Stage::Ingest));
        let named: Vec<&str> =
            [INGEST_KEYS, EMBED_KEYS, CLUSTER_KEYS, PLANNER_KEYS, PRETRAIN_KEYS, FINETUNE_KEYS].concat();
        assert!(named.iter().all(|k| RunConfig::KEYS.contains(k)), "stale key list");
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(RunConfig::KEYS.len(), c.entries().len());
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.context, c.kmeans_max_iters, c.lm_batch, c.planner_batch), (128, 300, 32, 32));
        assert_eq!((c.planner_lr, c.pretrain_lr, c.finetune_lr), (1e-4, 1e-4, 1e-4));
    }
}
