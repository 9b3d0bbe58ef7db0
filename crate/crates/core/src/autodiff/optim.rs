use crate::scalar::Scalar;

use super::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter and only for parameters that require gradients.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    first: Vec<Option<Vec<S>>>,
    second: Vec<Option<Vec<S>>>,
    steps: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let step_size = S::from_f64_lossy(c.learning_rate / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
        let eps = S::from_f64_lossy(c.eps);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let n = p.value.len();
            let m = self.first[i].get_or_insert_with(|| vec![S::zero(); n]);
            let v = self.second[i].get_or_insert_with(|| vec![S::zero(); n]);
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * *g;
                *v = b2 * *v + (S::one() - b2) * *g * *g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0f32, -1.0, 0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.0, -1.0, 0.5]);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0f32]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        opt.step(&mut store);
        assert!(store.value(id).item() < 1.0);
        assert_eq!(store.get(id).grad.data(), &[0.0], "grads cleared after step");
    }
}
