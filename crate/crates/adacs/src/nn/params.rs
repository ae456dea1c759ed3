//! Named parameter storage with gradient accumulators.
//!
//! Parameters live in a `BTreeMap` so iteration order is always sorted by
//! path — checkpoint manifests, optimizer sweeps and gradient clipping all
//! see the same deterministic order.

use std::collections::BTreeMap;

use super::tape::{Grads, NodeId, Tape};
use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Clone)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

#[derive(Clone)]
pub struct ParameterStore<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
    seed: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, path: &str, value: Tensor<S>) {
        debug_assert!(
            !self.params.contains_key(path),
            "parameter {path} registered twice"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.insert(path.to_string(), Param { value, grad });
    }

    pub fn get(&self, path: &str) -> Result<&Param<S>, NnError> {
        self.params
            .get(path)
            .ok_or_else(|| NnError::UnknownParam(path.to_string()))
    }

    pub fn set_value(&mut self, path: &str, value: Tensor<S>) -> Result<(), NnError> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| NnError::UnknownParam(path.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {path}: stored shape {:?} vs loaded {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sorted-by-path iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn accumulate_grad(&mut self, path: &str, grad: &Tensor<S>) -> Result<(), NnError> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| NnError::UnknownParam(path.to_string()))?;
        if !p.grad.same_shape(grad) {
            return Err(NnError::Shape(format!(
                "gradient for {path}: shape {:?} vs parameter {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .values()
            .map(|p| p.grad.data().iter().map(|&v| v * v).sum::<S>())
            .sum::<S>()
            .sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    /// Returns the post-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm {
            let factor = max_norm / norm;
            for p in self.params.values_mut() {
                for g in p.grad.data_mut() {
                    *g *= factor;
                }
            }
            max_norm
        } else {
            norm
        }
    }

    /// Converts the whole store to another scalar type (f64 checkpoints load
    /// into f32 models and vice versa).
    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::new(self.seed);
        for (path, p) in self.iter() {
            out.insert(path, p.value.cast());
        }
        out
    }
}

/// Binding of parameter paths to leaf nodes on one tape. A forward pass binds
/// each parameter it touches exactly once; after backward the accumulated leaf
/// gradients flow back into the store.
#[derive(Default)]
pub struct TapeParams {
    map: BTreeMap<String, NodeId>,
}

impl TapeParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        path: &str,
    ) -> Result<NodeId, NnError> {
        if let Some(&id) = self.map.get(path) {
            return Ok(id);
        }
        let id = tape.leaf(store.get(path)?.value.clone());
        self.map.insert(path.to_string(), id);
        Ok(id)
    }

    /// Adds every bound parameter's tape gradient into the store.
    pub fn accumulate_into<S: Scalar>(
        &self,
        grads: &Grads<S>,
        store: &mut ParameterStore<S>,
    ) -> Result<(), NnError> {
        for (path, &id) in &self.map {
            if let Some(g) = grads.get(id) {
                store.accumulate_grad(path, g)?;
            }
        }
        Ok(())
    }
}
