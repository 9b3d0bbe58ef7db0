use planlm::autodiff::gradcheck::{check_gradients, probe, GradCheckReport, LossGraph};
use planlm::autodiff::{AttnSpec, ParamId, ParamStore, Tape, Tensor, Var};
use planlm::{Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_report(name: &str, r: &GradCheckReport) {
    println!("{name}: checked {} max rel err {:.2e} worst {:?}", r.checked, r.max_rel_error, r.worst);
    assert!(r.passes(TOL), "{name}: {r:?}");
}

struct Linear {
    a: ParamId,
    b: ParamId,
    c: ParamId,
    bt: ParamId,
}

impl LossGraph for Linear {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let (a, b, c, bt) = (t.param(st, self.a), t.param(st, self.b), t.param(st, self.c), t.param(st, self.bt));
        let ab = t.matmul(a, b)?;
        let abt = t.matmul_nt(a, bt)?;
        let x = t.add(ab, c)?;
        let y = t.mul(x, abt)?;
        probe(t, y, 9)
    }
}

#[test]
fn matmul_and_broadcast_add() {
    let mut s = ParamStore::new();
    let g = Linear {
        a: s.add("a", randn(&[4, 3], 1)),
        b: s.add("b", randn(&[3, 5], 2)),
        c: s.add("c", randn(&[5], 3)),
        bt: s.add("bt", randn(&[5, 3], 4)),
    };
    assert_report("matmul/add/mul", &check_gradients(&s, &g, H, FLOOR).unwrap());
}

struct Norms {
    x: ParamId,
    g: ParamId,
    b: ParamId,
}

impl LossGraph for Norms {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let (x, g, b) = (t.param(st, self.x), t.param(st, self.g), t.param(st, self.b));
        let n = t.layer_norm(x, g, b)?;
        let a = t.gelu(n);
        let sm = t.softmax(a);
        let sc = t.scale(sm, S::from_f64_lossy(3.0));
        probe(t, sc, 10)
    }
}

#[test]
fn softmax_layer_norm_gelu_scale() {
    let mut s = ParamStore::new();
    let g = Norms { x: s.add("x", randn(&[3, 6], 5)), g: s.add("g", randn(&[6], 6)), b: s.add("b", randn(&[6], 7)) };
    assert_report("layernorm/gelu/softmax", &check_gradients(&s, &g, H, FLOOR).unwrap());
}

struct EmbedCe {
    table: ParamId,
    w: ParamId,
}

impl LossGraph for EmbedCe {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let (table, w) = (t.param(st, self.table), t.param(st, self.w));
        let e = t.embedding_opt(table, vec![Some(0), Some(3), None, Some(3), Some(4)])?;
        let logits = t.matmul(e, w)?;
        let weights: Vec<S> = [1.0, 0.5, 1.0, 0.0, 2.0].iter().map(|&v| S::from_f64_lossy(v)).collect();
        t.cross_entropy(logits, &[1, 6, 0, 2, 2], Some(&weights))
    }
}

#[test]
fn embedding_and_cross_entropy() {
    let mut s = ParamStore::new();
    let g = EmbedCe { table: s.add("table", randn(&[5, 4], 11)), w: s.add("w", randn(&[4, 7], 12)) };
    assert_report("embedding/cross_entropy", &check_gradients(&s, &g, H, FLOOR).unwrap());
}

struct Attn {
    qkv: ParamId,
    spec: AttnSpec,
}

impl LossGraph for Attn {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let q = t.param(st, self.qkv);
        let o = t.attention(q, self.spec.clone())?;
        probe(t, o, 14)
    }
}

#[test]
fn attention_causal_and_masked() {
    for (causal, lens) in [(true, None), (false, Some(vec![3, 2])), (true, Some(vec![1, 3]))] {
        let mut s = ParamStore::new();
        let g = Attn {
            qkv: s.add("qkv", randn(&[2 * 3, 3 * 4], 13)),
            spec: AttnSpec { batch: 2, seq: 3, heads: 2, causal, lens },
        };
        assert_report("attention", &check_gradients(&s, &g, H, FLOOR).unwrap());
    }
}

struct Pool {
    x: ParamId,
}

impl LossGraph for Pool {
    fn build<S: Scalar>(&self, t: &mut Tape<S>, st: &ParamStore<S>) -> Result<Var> {
        let x = t.param(st, self.x);
        let m = t.masked_mean_rows(x, 3, &[3, 1])?;
        let m = t.reshape(m, &[8])?;
        probe(t, m, 16)
    }
}

#[test]
fn masked_mean_rows_and_reshape() {
    let mut s = ParamStore::new();
    let g = Pool { x: s.add("x", randn(&[2 * 3, 4], 15)) };
    assert_report("masked_mean/reshape", &check_gradients(&s, &g, H, FLOOR).unwrap());
}
