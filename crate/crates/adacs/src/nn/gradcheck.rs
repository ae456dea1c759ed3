//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only re-evaluates a black-box loss closure with perturbed
//! parameters, so it stays independent of the tape's backward pass.

use super::params::ParameterStore;
use super::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares the gradients currently accumulated in `store` against central
/// finite differences of `loss_fn`, parameter element by parameter element.
///
/// A comparison fails when `|a - n| > rtol * max(|a|, |n|)` and also exceeds
/// `atol` (the absolute floor keeps exactly-zero gradients from tripping on
/// rounding noise).
pub fn check_gradients<S: Scalar>(
    store: &ParameterStore<S>,
    loss_fn: &dyn Fn(&ParameterStore<S>) -> f64,
    eps: f64,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (path, param) in store.iter() {
        for i in 0..param.value.numel() {
            let analytic = param.grad.data()[i].as_f64();
            let base = param.value.data()[i].as_f64();

            let mut probe = store.clone();
            let numeric = {
                set_elem(&mut probe, path, i, base + eps);
                let plus = loss_fn(&probe);
                set_elem(&mut probe, path, i, base - eps);
                let minus = loss_fn(&probe);
                set_elem(&mut probe, path, i, base);
                (plus - minus) / (2.0 * eps)
            };

            let diff = (analytic - numeric).abs();
            let denom = analytic.abs().max(numeric.abs());
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
            }
            if diff > atol && rel > rtol {
                report.mismatches.push(GradMismatch {
                    path: path.to_string(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}

fn set_elem<S: Scalar>(store: &mut ParameterStore<S>, path: &str, i: usize, v: f64) {
    for (p, param) in store.iter_mut() {
        if p == path {
            param.value.data_mut()[i] = S::from_f64(v);
            return;
        }
    }
    unreachable!("path came from iteration over the same store");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_gradient_passes() {
        // loss = sum(w^2), gradient 2w
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("w", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let grad = store.get("w").unwrap().value.scale(2.0);
        store.accumulate_grad("w", &grad).unwrap();
        let loss = |s: &ParameterStore<f64>| -> f64 {
            s.get("w").unwrap().value.data().iter().map(|v| v * v).sum()
        };
        let report = check_gradients(&store, &loss, 1e-5, 1e-6, 1e-10);
        assert!(report.passed(), "{:?}", report.mismatches);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        store
            .accumulate_grad("w", &Tensor::from_vec(&[1], vec![5.0]).unwrap())
            .unwrap();
        let loss = |s: &ParameterStore<f64>| -> f64 {
            let v = s.get("w").unwrap().value.data()[0];
            v * v
        };
        let report = check_gradients(&store, &loss, 1e-5, 1e-3, 1e-10);
        assert!(!report.passed());
    }
}
