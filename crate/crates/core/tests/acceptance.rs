//! End-to-end acceptance criteria, one pass/fail line each.
//!
//! `cargo test -p planlm --test acceptance [N ...]` runs every criterion, or
//! only the listed ones.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::oracles::{all_strings, blobs, f1, hmm_enumerate, lev_oracle, lloyd_oracle, random_dataset, ROUGE_FIXTURES};
use planlm::actions::{inertia, kmeans_fit, ActionId, KMeansConfig};
use planlm::autodiff::gradcheck::{check_gradients, probe, LossGraph};
use planlm::autodiff::{AttnSpec, ParamId, ParamStore, Tape, Tensor, Var};
use planlm::config::RunConfig;
use planlm::corpus::TokenId;
use planlm::eval::{hmm_fit, levenshtein, rouge2, HmmCritic};
use planlm::lm::{deinterleave, insert_style_sequence, insert_windows_for, AdapterConfig, AdapterInit, Conditioning, LanguageModel, LmConfig, Regime};
use planlm::pipeline::{Workspace, ACTIONS, BASE_LM, CENTROIDS, EVAL_REPORT, PLANNER};
use planlm::planner::{evaluate_planner, evaluate_planner_noisy, evaluate_planner_with_context, train_planner, HeadInit, Planner, PlannerConfig, PlannerTrainConfig};
use planlm::synthdata::cyclic_action_corpus;
use planlm::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 3] = [0, 1, 2];

type Check = fn() -> String;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gradcheck(name: &str, store: &ParamStore<f32>, graph: &impl LossGraph) -> String {
    let r = check_gradients(store, graph, H, 1e-3).unwrap();
    assert!(r.passes(TOL), "{name}: {r:?}");
    format!("{name} {:.1e}", r.max_rel_error)
}

struct Ops {
    a: ParamId,
    b: ParamId,
    g: ParamId,
    table: ParamId,
    qkv: ParamId,
}

impl LossGraph for Ops {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let (a, b, g) = (t.param(st, self.a), t.param(st, self.b), t.param(st, self.g));
        let x = t.matmul(a, b)?;
        let bt = t.matmul_nt(a, a)?;
        let n = t.layer_norm(x, g, g)?;
        let n = t.gelu(n);
        let n = t.softmax(n);
        let n = t.scale(n, S::from_f64_lossy(2.0));
        let table = t.param(st, self.table);
        let e = t.embedding_opt(table, vec![Some(1), None, Some(2), Some(0)])?;
        let e = t.mul(e, n)?;
        let pooled = t.masked_mean_rows(e, 2, &[2, 1])?;
        let qkv = t.param(st, self.qkv);
        let o = t.attention(qkv, AttnSpec { batch: 2, seq: 2, heads: 2, causal: true, lens: Some(vec![2, 1]) })?;
        let o = t.reshape(o, &[2, 8])?;
        let o = t.matmul_nt(o, pooled)?;
        let weights = [1.0, 0.5].map(S::from_f64_lossy);
        let ce = t.cross_entropy(o, &[1, 0], Some(&weights))?;
        let p = probe(t, bt, 3)?;
        t.add(ce, p)
    }
}

struct Lm {
    model: LanguageModel<f32>,
    tokens: Vec<usize>,
    targets: Vec<usize>,
    actions: Vec<ActionId>,
}

impl LossGraph for Lm {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let mut m = self.model.cast::<S>();
        *m.store_mut() = st.clone();
        let n = self.tokens.len();
        let logits = m.logits(t, &self.tokens, n / 2, &[n / 2, n / 2 - 1], &Conditioning::Actions(self.actions.clone()))?;
        let mut w = vec![S::one(); n];
        w[n - 1] = S::zero();
        t.cross_entropy(logits, &self.targets, Some(&w))
    }
}

fn c1_gradients() -> String {
    let mut s = ParamStore::new();
    let ops = Ops {
        a: s.add("a", randn(&[4, 8], 1)),
        b: s.add("b", randn(&[8, 8], 2)),
        g: s.add("g", randn(&[8], 3)),
        table: s.add("table", randn(&[3, 8], 4)),
        qkv: s.add("qkv", randn(&[4, 12], 5)),
    };
    let ops_line = gradcheck("ops", &s, &ops);

    let cfg = LmConfig { vocab_size: 13, d_model: 8, n_layers: 2, n_heads: 2, context: 8, seed: 7 };
    let mut model = LanguageModel::<f32>::new(cfg).unwrap();
    model.attach_adapter(AdapterConfig { init: AdapterInit::Random, ..AdapterConfig::new(3, 4, 2) }, None).unwrap();
    // Redraw at a scale where a 1e-3 step is small next to the layer-norm inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = model.store().value(id).shape().to_vec();
        *model.store_mut().value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    let params: usize = model.store().iter().map(|(_, p)| p.value.len()).sum();
    assert!(params <= 10_000, "{params} parameters");
    let tokens: Vec<usize> = (0..12).map(|_| rng.random_range(0..13)).collect();
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..13)).collect();
    let actions: Vec<ActionId> = (0..12).map(|_| rng.random_range(0..3)).collect();
    let lm = Lm { model: model.clone(), tokens, targets, actions };
    let lm_line = gradcheck(&format!("lm ({params} params)"), model.store(), &lm);
    format!("{ops_line}, {lm_line}")
}

fn c2_metric_oracles() -> String {
    let strings = all_strings(5, 3);
    for a in &strings {
        for b in &strings {
            assert_eq!(levenshtein(a, b), lev_oracle(a, b), "{a:?} {b:?}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..40u64 {
        let h = HmmCritic::<f64>::random(1 + case as usize % 3, 3, case);
        for t in 1..=5 {
            let seq: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
            worst = worst.max((h.log_likelihood(&seq).unwrap() - hmm_enumerate(&h, &seq)).abs());
        }
    }
    assert!(worst < 1e-8, "hmm forward off by {worst}");
    for (r, h, p, rc) in ROUGE_FIXTURES {
        let (r, h): (Vec<&str>, Vec<&str>) = (r.split_whitespace().collect(), h.split_whitespace().collect());
        let got = rouge2(&r, &h);
        assert!((got.precision - p).abs() < 1e-12 && (got.recall - rc).abs() < 1e-12 && (got.f1 - f1(p, rc)).abs() < 1e-12, "{r:?} {h:?} {got:?}");
    }
    format!("{} string pairs, hmm max err {worst:.1e}, {} rouge fixtures", strings.len().pow(2), ROUGE_FIXTURES.len())
}

fn c3_kmeans() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..100 {
        let data = random_dataset(&mut rng);
        let k = rng.random_range(1..8).min(data.rows());
        let set = kmeans_fit(&data, &KMeansConfig { k, seed: case, max_iters: 100, restarts: 1 }).unwrap();
        assert!(set.inertia_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12), "case {case}: {:?}", set.inertia_trace);
        let assign: Vec<usize> = data.iter_rows().map(|x| set.assign(x)).collect();
        assert!((inertia(&data, &set.centroids, &assign) - set.inertia).abs() <= 1e-9 * set.inertia.max(1.0));
    }
    let data = blobs(50, 4);
    let oracle = lloyd_oracle(&data, 6, 50, 1);
    let set = kmeans_fit(&data, &KMeansConfig { k: 6, seed: 0, max_iters: 300, restarts: 10 }).unwrap();
    let ratio = set.inertia / oracle;
    assert!(ratio <= 1.05, "inertia {} vs oracle {oracle}", set.inertia);
    format!("100 datasets monotone, blobs inertia ratio {ratio:.4}")
}

fn c4_planner() -> String {
    const K: usize = 8;
    const DIM: usize = 32;
    let (set, articles) = cyclic_action_corpus(300, 12, K, DIM, 0.3, 11);
    let (train, val) = articles.split_at(240);
    let mut planner = Planner::<f32>::new(PlannerConfig { n_heads: 4, ..PlannerConfig::new(DIM, K) }, Some(&set.centroids)).unwrap();
    train_planner(&mut planner, train, val, &PlannerTrainConfig { max_epochs: 40, ..Default::default() }).unwrap();
    let acc = evaluate_planner_with_context(&planner, val, 1).unwrap().accuracy;
    assert!(acc >= 0.95, "accuracy {acc}");

    let (_, articles) = cyclic_action_corpus(100, 12, K, DIM, 0.3, 12);
    let untrained = Planner::<f32>::new(PlannerConfig { head_init: HeadInit::Zero, ..PlannerConfig::new(DIM, K) }, None).unwrap();
    assert_eq!(evaluate_planner(&untrained, &articles).unwrap().average_rank, 1.0);
    let rank = evaluate_planner_noisy(&untrained, &articles, 1e-9, 5).unwrap().average_rank;
    let chance = (K as f64 + 1.0) / 2.0;
    assert!((0.9 * chance..=1.1 * chance).contains(&rank), "untrained rank {rank}");
    format!("trained accuracy {acc:.3}, untrained rank {rank:.2} (chance {chance})")
}

fn c5_zero_adapter() -> String {
    let cfg = LmConfig { vocab_size: 17, d_model: 16, n_layers: 3, n_heads: 4, context: 24, seed: 2 };
    let base = LanguageModel::<f32>::new(cfg).unwrap();
    let mut model = base.clone();
    model.attach_adapter(AdapterConfig { init: AdapterInit::Random, ..AdapterConfig::new(5, 8, 2) }, None).unwrap();
    for id in model.adapter_projection_ids() {
        model.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f32;
    for _ in 0..100 {
        let n = rng.random_range(1..=24);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..17)).collect();
        let actions: Vec<ActionId> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let want = base.sequence_logits(&tokens, &Conditioning::None).unwrap();
        let got = model.sequence_logits(&tokens, &Conditioning::Actions(actions)).unwrap();
        for (x, y) in want.iter().flatten().zip(got.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-6, "max logit difference {worst}");
    format!("100 inputs, max logit difference {worst:.1e}")
}

fn target_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn synthetic_config(seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.conf");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.seed = seed;
    cfg
}

fn with_regime(cfg: &RunConfig, regime: Regime) -> RunConfig {
    let mut c = cfg.clone();
    c.regime = regime;
    c
}

fn synthetic_dir(seed: u64) -> PathBuf {
    target_dir().join(format!("synthetic_seed{seed}"))
}

/// Fresh synthetic workspace with every shared stage run.
fn synthetic_workspace(seed: u64) -> Workspace {
    let dir = synthetic_dir(seed);
    let _ = std::fs::remove_dir_all(&dir);
    let ws = Workspace::new(&dir, synthetic_config(seed)).unwrap();
    ws.ingest().unwrap();
    ws.embed().unwrap();
    ws.cluster().unwrap();
    ws.actions().unwrap();
    ws.train_planner().unwrap();
    ws.pretrain_lm().unwrap();
    ws
}

fn c6_regime_ordering() -> String {
    let regimes = [Regime::Fixed, Regime::Oracle, Regime::PredictedPa];
    let mut ppl = [0.0; 3];
    let mut edit = [0.0; 3];
    for seed in SEEDS {
        let ws = synthetic_workspace(seed);
        for (i, &r) in regimes.iter().enumerate() {
            let w = Workspace::new(&ws.dir, with_regime(&ws.config, r)).unwrap();
            w.finetune().unwrap();
            let report = w.evaluate().unwrap();
            let m = &report.regimes[r.name()];
            println!("  seed {seed} {:<12} ppl {:.4} edit {:.3} rouge2 {:.4}", r.name(), m.ppl, m.generation.edit_mean, m.generation.rouge2_mean);
            ppl[i] += m.ppl / SEEDS.len() as f64;
            edit[i] += m.generation.edit_mean / SEEDS.len() as f64;
        }
    }
    let [fixed, oracle, pa] = ppl;
    let gain = 1.0 - oracle / fixed;
    let line = format!(
        "mean ppl fixed {fixed:.4} oracle {oracle:.4} ({:.1}% lower) predicted_pa {pa:.4}; mean edit fixed {:.3} predicted_pa {:.3}",
        100.0 * gain, edit[0], edit[2]
    );
    assert!(gain >= 0.05, "oracle gain below 5%: {line}");
    assert!(pa <= fixed, "predicted_pa ppl above fixed: {line}");
    assert!(edit[2] < edit[0], "predicted_pa edit not below fixed: {line}");
    line
}

fn c7_critic() -> String {
    let mut lines = Vec::new();
    for seed in SEEDS {
        let text = format!(
            "seed = {seed}\nsynth_articles = 300\nsynth_sentences = 8\nn_val = 50\nn_test = 50\nembed_dim = 64\nk = 6\ncritic_states = 6"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let dir = target_dir().join(format!("critic_seed{seed}"));
        let _ = std::fs::remove_dir_all(&dir);
        let ws = Workspace::new(&dir, cfg.clone()).unwrap();
        ws.ingest().unwrap();
        ws.embed().unwrap();
        ws.cluster().unwrap();
        ws.actions().unwrap();
        let p = ws.prepared().unwrap();
        let seqs = ws.sequences().unwrap();
        let of = |ids: &[String]| -> Vec<Vec<ActionId>> {
            ids.iter().map(|id| seqs.iter().find(|s| &s.article_id == id).unwrap().actions.clone()).collect()
        };
        let (critic, _) = hmm_fit::<f64>(&of(&p.splits.train), cfg.critic_states, cfg.k, cfg.stage_seed("critic"), cfg.critic_iters).unwrap();
        let val = of(&p.splits.val);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random: Vec<Vec<ActionId>> = val.iter().map(|s| (0..s.len()).map(|_| rng.random_range(0..cfg.k)).collect()).collect();
        let mean = |v: &[Vec<ActionId>]| {
            let p: Vec<f64> = v.iter().filter_map(|s| critic.latent_perplexity(s).unwrap()).collect();
            p.iter().sum::<f64>() / p.len() as f64
        };
        let (truth, noise) = (mean(&val), mean(&random));
        assert!(truth < noise, "seed {seed}: ground truth {truth} vs random {noise}");
        lines.push(format!("seed {seed} {truth:.3} < {noise:.3}"));
    }
    format!("latent ppl truth vs random: {}", lines.join(", "))
}

fn c8_oracle_scan() -> String {
    let dir = synthetic_dir(0);
    let mut cfg = with_regime(&synthetic_config(0), Regime::Oracle);
    cfg.scan_articles = 20;
    if Workspace::new(&dir, cfg.clone()).unwrap().scan_oracle().is_err() {
        synthetic_workspace(0);
        Workspace::new(&dir, cfg.clone()).unwrap().finetune().unwrap();
    }
    let (scan, noise) = Workspace::new(&dir, cfg).unwrap().scan_oracle().unwrap();
    assert_eq!(scan.articles.len(), 20);
    for a in &scan.articles {
        assert!(a.best_ppl <= a.oracle_ppl * (1.0 + 1e-9), "{a:?}");
    }
    assert!(scan.mean_oracle_rank > 1.0, "mean oracle rank {}", scan.mean_oracle_rank);
    format!(
        "mean oracle rank {:.3}, best-action ppl {:.4}, oracle ppl {:.4}; noise best {:.4} vs second-best action {:.4}",
        scan.mean_oracle_rank, scan.curve[0], scan.oracle_ppl, noise.curve[0], scan.curve[1]
    )
}

struct MaskedCe {
    logits: ParamId,
    targets: Vec<usize>,
    weights: Vec<f32>,
}

impl LossGraph for MaskedCe {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let l = t.param(st, self.logits);
        let w: Vec<S> = self.weights.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
        t.cross_entropy(l, &self.targets, Some(&w))
    }
}

fn c9_insert_style() -> String {
    let w = 4;
    let f = common::fixture(2, w, 64);
    let v = f.vocab.len();
    let cfg = LmConfig { vocab_size: v, d_model: 8, n_layers: 1, n_heads: 2, context: 64, seed: 1 };
    let base = LanguageModel::<f32>::new(cfg).unwrap();
    let ext = base.extend_vocab(w, 3).unwrap();
    for name in ["lm.tok_emb", "lm.head.w"] {
        let id = ext.store().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(ext.store().value(id).rows(), v + w, "{name}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let sentences: Vec<Vec<TokenId>> =
            (0..n).map(|_| (0..rng.random_range(0..5)).map(|_| rng.random_range(0..v as TokenId)).collect()).collect();
        let actions: Vec<ActionId> = (0..n).map(|_| rng.random_range(0..w)).collect();
        let ids = insert_style_sequence(&sentences, &actions, v);
        assert_eq!(deinterleave(&ids, v), (sentences, actions));
    }

    let doc = &f.docs[0];
    let windows = insert_windows_for(doc, &doc.oracle, v, false, 1024, false);
    let win = &windows[0];
    let masked = win.targets.iter().filter(|&&t| t >= v).count();
    assert_eq!(masked, doc.oracle.len());
    let mut s = ParamStore::new();
    let graph = MaskedCe { logits: s.add("logits", randn(&[win.targets.len(), v + w], 6)), targets: win.targets.clone(), weights: win.weights.clone() };
    let mut work = s.clone();
    let mut tape = Tape::new();
    let loss = graph.build(&mut tape, &work).unwrap();
    tape.backward(loss, &mut work).unwrap();
    let grad = &work.get(graph.logits).grad;
    for (r, &t) in win.targets.iter().enumerate() {
        let row = &grad.data()[r * (v + w)..(r + 1) * (v + w)];
        assert_eq!(t >= v, row.iter().all(|&g| g == 0.0), "row {r} target {t}");
    }
    let fd = gradcheck("masked cross entropy", &s, &graph);
    format!("{} rows extended, 200 round trips, {masked} masked action positions, {fd}", v + w)
}

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "synth_articles = 40\nsynth_sentences = 6\nn_val = 8\nn_test = 8\nembed_dim = 16\nhash_buckets = 4096\nk = 4\n\
         kmeans_restarts = 2\nplanner_layers = 1\nplanner_epochs = 2\nlm_dim = 16\nlm_layers = 2\nlm_heads = 2\ncontext = 32\n\
         pretrain_epochs = 1\nfinetune_epochs = 1\nlengths = 8,16\neval_articles = 3\ncritic_states = 3\ncritic_iters = 5",
    )
    .unwrap()
}

fn c10_determinism() -> String {
    let dirs = [target_dir().join("repro_a"), target_dir().join("repro_b")];
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
        Workspace::new(d, tiny_config()).unwrap().run_all().unwrap();
    }
    let names = [CENTROIDS, ACTIONS, PLANNER, BASE_LM, "lm_predicted_pa.plmc", EVAL_REPORT];
    for name in names {
        let (a, b) = (std::fs::read(dirs[0].join(name)).unwrap(), std::fs::read(dirs[1].join(name)).unwrap());
        assert!(a == b, "{name} differs");
    }
    format!("{} artifacts byte-identical", names.len())
}

const CRITERIA: [(&str, Check); 10] = [
    ("gradients match finite differences", c1_gradients),
    ("metrics match independent oracles", c2_metric_oracles),
    ("k-means is monotone and near-optimal", c3_kmeans),
    ("planner learns cycles and ranks at chance untrained", c4_planner),
    ("zero adapter projection leaves the base model unchanged", c5_zero_adapter),
    ("oracle beats fixed, predicted matches or beats fixed", c6_regime_ordering),
    ("critic prefers real action sequences to random ones", c7_critic),
    ("oracle scan finds actions at least as good as the oracle", c8_oracle_scan),
    ("insert style extends, interleaves and masks", c9_insert_style),
    ("pipeline runs are byte-identical", c10_determinism),
];

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::fs::create_dir_all(target_dir()).unwrap();
    std::panic::set_hook(Box::new(|info| {
        if let Some(l) = info.location() {
            eprintln!("  panicked at {}:{}", l.file(), l.line());
        }
    }));
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{:.0?}] {detail}", t.elapsed()),
            Err(e) => {
                failed += 1;
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                println!("criterion {n} ({name}): FAIL [{:.0?}] {msg}", t.elapsed());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
