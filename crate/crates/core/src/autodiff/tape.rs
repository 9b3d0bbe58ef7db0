//! Reverse-mode tape. Every op stores the values it needs for an exact
//! backward pass; `backward` walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

use super::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Shape of a fused multi-head attention call over a packed `[B*T, 3D]` qkv
/// buffer (queries, keys and values side by side).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid length per batch item. Keys at or beyond it are masked and the
    /// matching query rows produce zeros.
    pub lens: Option<Vec<usize>>,
}

impl AttnSpec {
    fn len_of(&self, b: usize) -> usize {
        self.lens.as_ref().map_or(self.seq, |l| l[b].min(self.seq))
    }
}

enum Op<S> {
    Constant,
    Param(ParamId),
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Reshape { a: Var },
    MatMul { a: Var, b: Var, b_transposed: bool },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<Option<usize>> },
    Attention { qkv: Var, spec: AttnSpec, probs: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S>, total_weight: S },
    Sum { a: Var },
    MaskedMeanRows { a: Var, seq: usize, lens: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Computation graph confined to one thread. Build with the op methods,
/// then call [`Tape::backward`] on a scalar loss.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Row-wise layer norm; returns normalized rows and per-row reciprocal std.
pub(crate) fn layer_norm_rows<S: Scalar>(x: &[S], cols: usize) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / cols;
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let n = S::from_usize_lossy(cols);
    let eps = S::from_f64_lossy(LN_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head scaled dot-product attention forward on a packed qkv buffer.
/// Returns the concatenated head contexts `[B*T, D]` and the attention
/// probabilities `[B, H, T, T]`.
pub(crate) fn attention_forward<S: Scalar>(qkv: &[S], d_model: usize, spec: &AttnSpec) -> (Vec<S>, Vec<S>) {
    let (bsz, t, h) = (spec.batch, spec.seq, spec.heads);
    let dh = d_model / h;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let width = 3 * d_model;
    let mut out = vec![S::zero(); bsz * t * d_model];
    let mut probs = vec![S::zero(); bsz * h * t * t];
    let mut q = vec![S::zero(); t * dh];
    let mut k = vec![S::zero(); t * dh];
    let mut v = vec![S::zero(); t * dh];
    let mut ctx = vec![S::zero(); t * dh];
    for b in 0..bsz {
        let len = spec.len_of(b);
        if len == 0 {
            continue;
        }
        for hh in 0..h {
            gather_head(qkv, b * t, len, width, hh * dh, dh, &mut q);
            gather_head(qkv, b * t, len, width, d_model + hh * dh, dh, &mut k);
            gather_head(qkv, b * t, len, width, 2 * d_model + hh * dh, dh, &mut v);
            let p = &mut probs[((b * h + hh) * t) * t..((b * h + hh) * t + t) * t];
            // scores for the valid len x len block, stored with row stride t
            let mut scores = vec![S::zero(); len * len];
            gemm(
                MatRef::new(&q[..len * dh], len, dh),
                MatRef::new(&k[..len * dh], len, dh).t(),
                S::zero(),
                &mut scores,
            );
            for i in 0..len {
                let row = &mut scores[i * len..(i + 1) * len];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if spec.causal && j > i { S::neg_infinity() } else { *s * scale };
                }
                softmax_in_place(row);
                p[i * t..i * t + len].copy_from_slice(row);
            }
            gemm(
                MatRef::new(&scores, len, len),
                MatRef::new(&v[..len * dh], len, dh),
                S::zero(),
                &mut ctx[..len * dh],
            );
            for i in 0..len {
                let dst = (b * t + i) * d_model + hh * dh;
                out[dst..dst + dh].copy_from_slice(&ctx[i * dh..(i + 1) * dh]);
            }
        }
    }
    (out, probs)
}

fn gather_head<S: Scalar>(buf: &[S], row0: usize, len: usize, width: usize, col0: usize, dh: usize, dst: &mut [S]) {
    for i in 0..len {
        let src = (row0 + i) * width + col0;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&buf[src..src + dh]);
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by op");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !trailing_broadcast(sa, sb) {
            return Err(Error::Shape { op: "add", left: sa.to_vec(), right: sb.to_vec() });
        }
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[i % n];
        }
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add { a, b }, tr))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !trailing_broadcast(sa, sb) {
            return Err(Error::Shape { op: "mul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv[i % n];
        }
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul { a, b }, tr))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let tr = self.tracked(a);
        self.push(out, Op::Scale { a, factor }, tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Reshape { a }, tr))
    }

    /// `a [.., K] x b [K, N] -> [.., N]`, leading axes of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., K] x b^T` with `b` stored as `[N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() {
            return Err(Error::Shape { op: "matmul", left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let (m, k) = (ta.rows(), ta.cols());
        let bm = MatRef::new(tb.data(), tb.shape()[0], tb.shape()[1]);
        let bm = if b_transposed { bm.t() } else { bm };
        let (bk, n) = bm.dims();
        if bk != k {
            return Err(Error::Shape { op: "matmul", left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let mut out = vec![S::zero(); m * n];
        gemm(MatRef::new(ta.data(), m, k), bm, S::zero(), &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, b_transposed }, tr))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let tr = self.tracked(a);
        self.push(out, Op::Softmax { a }, tr)
    }

    /// Layer normalization over the last axis with learned gain and bias (eps 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        for g in [gain, bias] {
            if self.value(g).len() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(g).shape().to_vec(),
                });
            }
        }
        let (xhat, rstd) = layer_norm_rows(self.value(x).data(), c);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<S> = xhat.iter().enumerate().map(|(i, &v)| v * gv[i % c] + bv[i % c]).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let tr = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, tr))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let tr = self.tracked(a);
        self.push(out, Op::Gelu { a }, tr)
    }

    /// Row lookup into a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.embedding_opt(table, ids)
    }

    /// Row lookup where `None` yields a zero row.
    pub fn embedding_opt(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape { op: "embedding", left: t.shape().to_vec(), right: vec![ids.len()] });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![S::zero(); ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = *id {
                if i >= v {
                    return Err(Error::Shape { op: "embedding", left: vec![v, d], right: vec![i] });
                }
                out[r * d..(r + 1) * d].copy_from_slice(t.row(i));
            }
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let tr = self.tracked(table);
        Ok(self.push(out, Op::Embedding { table, ids }, tr))
    }

    /// Multi-head attention over a packed `[B*T, 3D]` query/key/value buffer.
    pub fn attention(&mut self, qkv: Var, spec: AttnSpec) -> Result<Var> {
        let t = self.value(qkv);
        let width = t.cols();
        if !width.is_multiple_of(3) || t.rows() != spec.batch * spec.seq || !(width / 3).is_multiple_of(spec.heads) {
            return Err(Error::Shape {
                op: "attention",
                left: t.shape().to_vec(),
                right: vec![spec.batch, spec.seq, spec.heads],
            });
        }
        if let Some(l) = &spec.lens {
            if l.len() != spec.batch {
                return Err(Error::Shape { op: "attention", left: vec![spec.batch], right: vec![l.len()] });
            }
        }
        let d = width / 3;
        let (out, probs) = attention_forward(t.data(), d, &spec);
        let out = Tensor::new(vec![spec.batch * spec.seq, d], out)?;
        let tr = self.tracked(qkv);
        Ok(self.push(out, Op::Attention { qkv, spec, probs }, tr))
    }

    /// Weighted mean token cross-entropy of `[N, V]` logits. Rows with zero
    /// weight do not contribute; the loss is normalized by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[S]>) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::Shape { op: "cross_entropy", left: t.shape().to_vec(), right: vec![targets.len()] });
        }
        let weights: Vec<S> = weights.map_or_else(|| vec![S::one(); n], <[S]>::to_vec);
        let mut probs = t.data().to_vec();
        let mut total = 0.0f64;
        let mut wsum = 0.0f64;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::Shape { op: "cross_entropy", left: vec![n, v], right: vec![tgt] });
            }
            let w = weights[r].as_f64();
            if w == 0.0 {
                row.iter_mut().for_each(|x| *x = S::zero());
                continue;
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max).as_f64();
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[tgt].as_f64());
            for x in row.iter_mut() {
                *x = S::from_f64_lossy((x.as_f64() - lse).exp());
            }
            wsum += w;
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let tr = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(S::from_f64_lossy(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight: S::from_f64_lossy(wsum),
            },
            tr,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let tr = self.tracked(a);
        self.push(Tensor::scalar(S::from_f64_lossy(s)), Op::Sum { a }, tr)
    }

    /// Mean of the first `lens[b]` rows of each length-`seq` block of a
    /// `[B*seq, D]` matrix, giving `[B, D]`.
    pub fn masked_mean_rows(&mut self, a: Var, seq: usize, lens: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let d = t.cols();
        let bsz = lens.len();
        if t.rows() != bsz * seq || lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(Error::Shape { op: "masked_mean_rows", left: t.shape().to_vec(), right: lens.to_vec() });
        }
        let mut out = vec![S::zero(); bsz * d];
        for (b, &len) in lens.iter().enumerate() {
            let inv = S::one() / S::from_usize_lossy(len);
            let dst = &mut out[b * d..(b + 1) * d];
            for r in 0..len {
                for (o, &x) in dst.iter_mut().zip(t.row(b * seq + r)) {
                    *o += x * inv;
                }
            }
        }
        let out = Tensor::new(vec![bsz, d], out)?;
        let tr = self.tracked(a);
        Ok(self.push(out, Op::MaskedMeanRows { a, seq, lens: lens.to_vec() }, tr))
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter gradients
    /// into `store`. Node gradients remain readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape { op: "backward", left: self.value(loss).shape().to_vec(), right: vec![] });
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                self.grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, store);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&mut self, idx: usize, g: &[S], store: &mut ParamStore<S>) {
        // Ops reference their inputs by index; temporarily take the op out so
        // the tape can be mutated while reading the cached state.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
        match &op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Add { a, b } => {
                if self.tracked(*a) {
                    self.acc(*a, g.to_vec());
                }
                if self.tracked(*b) {
                    let n = self.value(*b).len().max(1);
                    let mut gb = vec![S::zero(); n];
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % n] += x;
                    }
                    self.acc(*b, gb);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = bv.len().max(1);
                let ga: Vec<S> = g.iter().enumerate().map(|(i, &x)| x * bv[i % n]).collect();
                let mut gb = vec![S::zero(); n];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % n] += x * av[i];
                }
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Scale { a, factor } => {
                let ga = g.iter().map(|&x| x * *factor).collect();
                self.acc(*a, ga);
            }
            Op::Reshape { a } => self.acc(*a, g.to_vec()),
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = g.len() / m.max(1);
                let bm = MatRef::new(tb.data(), tb.shape()[0], tb.shape()[1]);
                let gm = MatRef::new(g, m, n);
                let ga = if self.tracked(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    // dA = dOut * B^T (B logical [K, N])
                    let b_logical_t = if *b_transposed { bm } else { bm.t() };
                    gemm(gm, b_logical_t, S::zero(), &mut ga);
                    Some(ga)
                } else {
                    None
                };
                let gb = if self.tracked(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    let am = MatRef::new(ta.data(), m, k);
                    if *b_transposed {
                        // B stored [N, K]: dB = dOut^T * A
                        gemm(gm.t(), am, S::zero(), &mut gb);
                    } else {
                        gemm(am.t(), gm, S::zero(), &mut gb);
                    }
                    Some(gb)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.acc(*a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(*b, gb);
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[idx].value.data();
                let c = self.nodes[idx].value.cols();
                let mut ga = vec![S::zero(); y.len()];
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*x).cols();
                let gv = self.value(*gain).data().to_vec();
                let rows = xhat.len() / c;
                let mut gx = vec![S::zero(); xhat.len()];
                let mut gg = vec![S::zero(); c];
                let mut gbias = vec![S::zero(); c];
                let nc = S::from_usize_lossy(c);
                for r in 0..rows {
                    let xr = &xhat[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                    mean_d /= nc;
                    mean_dx /= nc;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (gr[j] * gv[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                self.acc(*x, gx);
                self.acc(*gain, gg);
                self.acc(*bias, gbias);
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                let ga = av.iter().zip(g).map(|(&x, &d)| d * gelu_grad(x)).collect();
                self.acc(*a, ga);
            }
            Op::Embedding { table, ids } => {
                if self.tracked(*table) {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut gt = vec![S::zero(); t.len()];
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = *id {
                            for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *o += x;
                            }
                        }
                    }
                    self.acc(*table, gt);
                }
            }
            Op::Attention { qkv, spec, probs } => {
                let gq = attention_backward(self.value(*qkv).data(), g, probs, spec);
                self.acc(*qkv, gq);
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                let v = self.value(*logits).cols();
                let mut gl = probs.clone();
                if *total_weight > S::zero() {
                    let scale = g[0] / *total_weight;
                    for (r, row) in gl.chunks_mut(v).enumerate() {
                        let w = weights[r];
                        if w == S::zero() {
                            continue;
                        }
                        row[targets[r]] -= S::one();
                        row.iter_mut().for_each(|x| *x *= w * scale);
                    }
                } else {
                    gl.iter_mut().for_each(|x| *x = S::zero());
                }
                self.acc(*logits, gl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.acc(*a, vec![g[0]; n]);
            }
            Op::MaskedMeanRows { a, seq, lens } => {
                let t = self.value(*a);
                let d = t.cols();
                let mut ga = vec![S::zero(); t.len()];
                for (b, &len) in lens.iter().enumerate() {
                    let inv = S::one() / S::from_usize_lossy(len);
                    for r in 0..len {
                        let row = (b * seq + r) * d;
                        for j in 0..d {
                            ga[row + j] = g[b * d + j] * inv;
                        }
                    }
                }
                self.acc(*a, ga);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn attention_backward<S: Scalar>(qkv: &[S], gout: &[S], probs: &[S], spec: &AttnSpec) -> Vec<S> {
    let (bsz, t, h) = (spec.batch, spec.seq, spec.heads);
    let width = qkv.len() / (bsz * t).max(1);
    let d = width / 3;
    let dh = d / h;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut gq = vec![S::zero(); qkv.len()];
    let mut q = vec![S::zero(); t * dh];
    let mut k = vec![S::zero(); t * dh];
    let mut v = vec![S::zero(); t * dh];
    let mut go = vec![S::zero(); t * dh];
    for b in 0..bsz {
        let len = spec.len_of(b);
        if len == 0 {
            continue;
        }
        for hh in 0..h {
            gather_head(qkv, b * t, len, width, hh * dh, dh, &mut q);
            gather_head(qkv, b * t, len, width, d + hh * dh, dh, &mut k);
            gather_head(qkv, b * t, len, width, 2 * d + hh * dh, dh, &mut v);
            gather_head(gout, b * t, len, d, hh * dh, dh, &mut go);
            let pfull = &probs[((b * h + hh) * t) * t..((b * h + hh) * t + t) * t];
            let mut p = vec![S::zero(); len * len];
            for i in 0..len {
                p[i * len..(i + 1) * len].copy_from_slice(&pfull[i * t..i * t + len]);
            }
            let (qm, km, vm) = (
                MatRef::new(&q[..len * dh], len, dh),
                MatRef::new(&k[..len * dh], len, dh),
                MatRef::new(&v[..len * dh], len, dh),
            );
            let gom = MatRef::new(&go[..len * dh], len, dh);
            let pm = MatRef::new(&p, len, len);
            // dV = P^T dO
            let mut gv = vec![S::zero(); len * dh];
            gemm(pm.t(), gom, S::zero(), &mut gv);
            // dP = dO V^T
            let mut gp = vec![S::zero(); len * len];
            gemm(gom, vm.t(), S::zero(), &mut gp);
            // dS = P * (dP - rowdot(dP, P)) * scale
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let gr = &mut gp[i * len..(i + 1) * len];
                let dot: S = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    gr[j] = pr[j] * (gr[j] - dot) * scale;
                }
            }
            let gsm = MatRef::new(&gp, len, len);
            let mut gqh = vec![S::zero(); len * dh];
            gemm(gsm, km, S::zero(), &mut gqh);
            let mut gkh = vec![S::zero(); len * dh];
            gemm(gsm.t(), qm, S::zero(), &mut gkh);
            for i in 0..len {
                let row = (b * t + i) * width;
                for j in 0..dh {
                    gq[row + hh * dh + j] += gqh[i * dh + j];
                    gq[row + d + hh * dh + j] += gkh[i * dh + j];
                    gq[row + 2 * d + hh * dh + j] += gv[i * dh + j];
                }
            }
        }
    }
    gq
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 4]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 200.0, 0.0]));
        let l = tape.cross_entropy(x, &[1], None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn matmul_integer_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
        assert_eq!(tape.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient_is_2x() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[3], &[1.0, -2.0, 0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let l = tape.sum(x);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);

        store.zero_grads();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f32>::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        store.set_requires_grad(id, false);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.sum(w);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let mut tape = Tape::<f64>::new();
        // B=1, T=2, D=2, one head; v rows are [1,0] and [0,1]
        let qkv = tape.constant(Tensor::new(vec![2, 6], vec![1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 1.]).unwrap());
        let out = tape
            .attention(qkv, AttnSpec { batch: 1, seq: 2, heads: 1, causal: true, lens: None })
            .unwrap();
        assert_eq!(tape.value(out).row(0), &[1.0, 0.0]);
    }
}
