//! Pre-norm transformer blocks and parameter initialization shared by the
//! planner and the language model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AttnSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Gaussian tensor drawn in f64 and cast, so both precisions see the same
/// values for the same seed.
pub fn gaussian<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(std * Distribution::<f64>::sample(&StandardNormal, rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// `x @ w + b` for `x: [N, I]`, `w: [I, O]`, `b: [O]`.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    tape.layer_norm(x, g, b)
}

/// Parameter ids of a layer-norm pair.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.g"), Tensor::full(&[d], S::one())),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        layer_norm(tape, store, x, self.gain, self.bias)
    }
}

/// One pre-norm block: `h = x + Wo(attn(LN1 x) + r) + bo`,
/// `y = h + W2 gelu(W1 LN2 h + b1) + b2`, where `r` is an optional additive
/// term on the concatenated attention context.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln2: Norm,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub heads: usize,
}

impl Block {
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        Self {
            ln1: Norm::register(store, &format!("{prefix}.ln1"), d),
            qkv_w: store.add(format!("{prefix}.attn.qkv_w"), gaussian(&[d, 3 * d], std, rng)),
            qkv_b: store.add(format!("{prefix}.attn.qkv_b"), Tensor::zeros(&[3 * d])),
            out_w: store.add(format!("{prefix}.attn.out_w"), gaussian(&[d, d], std, rng)),
            out_b: store.add(format!("{prefix}.attn.out_b"), Tensor::zeros(&[d])),
            ln2: Norm::register(store, &format!("{prefix}.ln2"), d),
            ff1_w: store.add(format!("{prefix}.ff.w1"), gaussian(&[d, 4 * d], std, rng)),
            ff1_b: store.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[4 * d])),
            ff2_w: store.add(format!("{prefix}.ff.w2"), gaussian(&[4 * d, d], std, rng)),
            ff2_b: store.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[d])),
            heads,
        }
    }

    /// `x` is `[B*T, D]`; `context_add`, when given, is `[B*T, D]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        spec: &AttnSpec,
        context_add: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let qkv = linear(tape, store, h, self.qkv_w, self.qkv_b)?;
        let mut ctx = tape.attention(qkv, AttnSpec { heads: self.heads, ..spec.clone() })?;
        if let Some(r) = context_add {
            ctx = tape.add(ctx, r)?;
        }
        let att = linear(tape, store, ctx, self.out_w, self.out_b)?;
        let x = tape.add(x, att)?;
        let h = self.ln2.forward(tape, store, x)?;
        let f = linear(tape, store, h, self.ff1_w, self.ff1_b)?;
        let f = tape.gelu(f);
        let f = linear(tape, store, f, self.ff2_w, self.ff2_b)?;
        tape.add(x, f)
    }
}
