//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from the tape at the store's own precision;
//! the numeric derivative is taken on an `f64` copy of the same graph, so
//! the oracle is not limited by `f32` rounding of the loss.

use crate::error::Result;
use crate::scalar::Scalar;

use super::{ParamStore, Tape, Tensor, Var};

/// A loss graph that can be built at any scalar precision.
pub trait LossGraph {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> Result<Var>;
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error with the magnitude floored at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn cast_store<S: Scalar, T: Scalar>(store: &ParamStore<S>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (_, p) in store.iter() {
        let id = out.add(p.name.clone(), p.value.cast::<T>());
        out.set_requires_grad(id, p.requires_grad);
    }
    out
}

/// Checks every entry of every trainable parameter of `store`.
pub fn check_gradients<S: Scalar, L: LossGraph>(
    store: &ParamStore<S>,
    graph: &L,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = graph.build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;

    let mut hi: ParamStore<f64> = cast_store(store);
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = graph.build(&mut tape, st)?;
        Ok(tape.value(l).item())
    };

    let mut report = GradCheckReport::default();
    for (id, p) in work.iter().filter(|(_, p)| p.requires_grad) {
        for (i, &g) in p.grad.data().iter().enumerate() {
            let orig = hi.value(id).data()[i];
            hi.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&hi)?;
            hi.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&hi)?;
            hi.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(g.as_f64(), numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.name.clone(), i, g.as_f64(), numeric));
            }
        }
    }
    Ok(report)
}

/// `sum(out * R)` for a fixed Gaussian `R` drawn from `seed`; gives every
/// upstream gradient entry an O(1) magnitude.
pub fn probe<S: Scalar>(tape: &mut Tape<S>, out: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let shape = tape.value(out).shape().to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r: Tensor<f64> = Tensor::randn(&shape, 1.0, &mut rng);
    let r = tape.constant(r.cast());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}
