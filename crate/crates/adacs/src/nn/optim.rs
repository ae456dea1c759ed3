//! Adam optimizer with global-norm gradient clipping.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{Scalar, Tensor};

pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips gradients to `clip_norm`, applies one Adam update, and zeroes the
    /// gradients. Returns the post-clip gradient norm.
    pub fn step(&mut self, store: &mut ParameterStore<S>) -> S {
        let clipped = store.clip_grad_norm(S::from_f64(self.clip_norm));
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (path, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let g = p.grad.data();
            let mv = m.data_mut();
            let vv = v.data_mut();
            let out = p.value.data_mut();
            for i in 0..g.len() {
                mv[i] = b1 * mv[i] + (one - b1) * g[i];
                vv[i] = b2 * vv[i] + (one - b2) * g[i] * g[i];
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                out[i] = out[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        clipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = store.get("w").unwrap().value.item();
            store
                .accumulate_grad("w", &Tensor::scalar(2.0 * (w - 3.0)))
                .unwrap();
            opt.step(&mut store);
        }
        let w = store.get("w").unwrap().value.item();
        assert!((w - 3.0).abs() < 1e-2, "converged to {w}");
    }

    #[test]
    fn step_reports_clipped_norm() {
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("w", Tensor::zeros(&[2]));
        store
            .accumulate_grad("w", &Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(0.001);
        let norm = opt.step(&mut store);
        assert!(norm <= 1.0 + 1e-6);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut store = ParameterStore::<f64>::new(0);
            store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
            let mut opt = Adam::new(0.01);
            for step in 0..10 {
                let g = 0.1 * (step as f64 + 1.0);
                store
                    .accumulate_grad("w", &Tensor::from_vec(&[2], vec![g, -g]).unwrap())
                    .unwrap();
                opt.step(&mut store);
            }
            store.get("w").unwrap().value.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
