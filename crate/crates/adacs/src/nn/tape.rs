//! Reverse-mode autodiff on a flat tape.
//!
//! Every op appends a node holding the forward value plus a closure that maps
//! the node's output gradient to gradients for its parents. `backward` walks
//! the tape in reverse and accumulates. Closures capture clones of whatever
//! forward values they need, so the backward pass never re-reads the tape.

use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<NodeId>,
    back: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, parents: Vec<NodeId>, back: Option<BackFn<S>>) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite forward value at node {} (parents {:?})",
            self.nodes.len(),
            parents
        );
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf (input or parameter). Gradients accumulate on leaves but
    /// do not propagate further.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, vec![], None)
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId, NnError> {
        let first = self.value(ids[0]).clone();
        let mut out = first;
        for &id in &ids[1..] {
            let v = self.value(id);
            if !out.same_shape(v) {
                return Err(NnError::Shape(format!(
                    "add: shape {:?} vs {:?}",
                    out.shape(),
                    v.shape()
                )));
            }
            out.add_assign(v);
        }
        let arity = ids.len();
        Ok(self.push(
            out,
            ids.to_vec(),
            Some(Box::new(move |g| vec![g.clone(); arity])),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let out = self.value(a).scale(c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.scale(c)])),
        )
    }

    /// `y = x W^T + b` with `x: [n,d_in]`, `W: [d_out,d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NnError> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (_, d_in) = xv.dims2();
        let (d_out, d_in2) = wv.dims2();
        if d_in != d_in2 {
            return Err(NnError::Shape(format!(
                "linear: input dim {d_in} vs weight dim {d_in2}"
            )));
        }
        let mut out = xv.matmul_nt(&wv);
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            let bv = self.value(bid);
            if bv.shape() != [d_out] {
                return Err(NnError::Shape(format!(
                    "linear: bias shape {:?}, want [{d_out}]",
                    bv.shape()
                )));
            }
            let bd = bv.data();
            for i in 0..out.dims2().0 {
                let row = &mut out.data_mut()[i * d_out..(i + 1) * d_out];
                for (o, &bj) in row.iter_mut().zip(bd) {
                    *o += bj;
                }
            }
            parents.push(bid);
        }
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let dx = g.matmul(&wv);
                let dw = g.matmul_tn(&xv);
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(g.col_sums());
                }
                grads
            })),
        ))
    }

    /// `[n,k] x [k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.dims2().1 != bv.dims2().0 {
            return Err(NnError::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(&bv);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.matmul_nt(&bv), av.matmul_tn(g)]
            })),
        ))
    }

    /// `[n,k] x [m,k]^T` — rows of `a` dotted with rows of `b`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.dims2().1 != bv.dims2().1 {
            return Err(NnError::Shape(format!(
                "matmul_nt: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul_nt(&bv);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.matmul(&bv), g.matmul_tn(&av)]
            })),
        ))
    }

    /// Row softmax. `mask`, when given, marks the positions allowed to receive
    /// probability; the rest get exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<Arc<Vec<bool>>>) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        if let Some(mk) = &mask {
            debug_assert_eq!(mk.len(), n * m, "mask length");
        }
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = xv.row(i);
            let allowed = |j: usize| mask.as_ref().map_or(true, |mk| mk[i * m + j]);
            let mut mx = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            debug_assert!(mx.is_finite(), "softmax row {i} fully masked");
            let mut denom = S::zero();
            let orow = &mut out.data_mut()[i * m..(i + 1) * m];
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let yv = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let (n, m) = yv.dims2();
                let mut dx = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let y = yv.row(i);
                    let gr = g.row(i);
                    let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let drow = &mut dx.data_mut()[i * m..(i + 1) * m];
                    for j in 0..m {
                        drow[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// GELU, tanh approximation. Smooth everywhere, so central finite
    /// differences stay well-behaved.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044_715);
        let half = S::from_f64(0.5);
        let one = S::one();
        let out = xv.map(|v| {
            let u = c * (v + k * v * v * v);
            half * v * (one + u.tanh())
        });
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let three = S::from_f64(3.0);
                let dx = xv.zip_map(g, |v, gg| {
                    let u = c * (v + k * v * v * v);
                    let t = u.tanh();
                    let du = c * (one + three * k * v * v);
                    let d = half * (one + t) + half * v * (one - t * t) * du;
                    gg * d
                });
                vec![dx]
            })),
        )
    }

    /// Row-wise layer normalization with learned gain/bias of shape `[d]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NnError> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta);
        let (n, d) = xv.dims2();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(NnError::Shape(format!(
                "layer_norm: gamma {:?} beta {:?} vs feature dim {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = S::from_f64(1e-5);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv_std = vec![S::zero(); n];
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat.data_mut()[i * d + j] = xh;
                out.data_mut()[i * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let (n, d) = xhat.dims2();
                let inv_d = S::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for i in 0..n {
                    let gr = g.row(i);
                    let xh = xhat.row(i);
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        dgamma.data_mut()[j] += gr[j] * xh[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                    let istd = inv_std[i];
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        dx.data_mut()[i * d + j] =
                            istd * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    /// Gathers rows `ids` from an embedding table node.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NnError> {
        let tv = self.value(table).clone();
        let (rows, d) = tv.dims2();
        for &id in ids {
            if id >= rows {
                return Err(NnError::Shape(format!(
                    "embedding: id {id} out of range for table with {rows} rows"
                )));
            }
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(tv.row(id));
        }
        let ids_owned: Vec<usize> = ids.to_vec();
        Ok(self.push(
            out,
            vec![table],
            Some(Box::new(move |g| {
                let mut dt = Tensor::zeros(&[rows, d]);
                for (i, &id) in ids_owned.iter().enumerate() {
                    let gr = g.row(i);
                    let drow = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &v) in drow.iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                vec![dt]
            })),
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        if start > end || end > n {
            return Err(NnError::Shape(format!(
                "slice_rows: {start}..{end} of {n} rows"
            )));
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[n, m]);
                dx.data_mut()[start * m..end * m].copy_from_slice(g.data());
                vec![dx]
            })),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        let (n, m) = xv.dims2();
        if start > end || end > m {
            return Err(NnError::Shape(format!(
                "slice_cols: {start}..{end} of {m} cols"
            )));
        }
        let out = xv.slice_cols(start, end);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[n, m]);
                let w = end - start;
                for i in 0..n {
                    dx.data_mut()[i * m + start..i * m + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![dx]
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let n = values[0].dims2().0;
        if values.iter().any(|v| v.dims2().0 != n) {
            return Err(NnError::Shape("concat_cols: row counts differ".into()));
        }
        let widths: Vec<usize> = values.iter().map(|v| v.dims2().1).collect();
        let out = Tensor::concat_cols(&values);
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    grads.push(g.slice_cols(start, start + w));
                    start += w;
                }
                grads
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = values[0].dims2().1;
        if values.iter().any(|v| v.dims2().1 != m) {
            return Err(NnError::Shape("concat_rows: col counts differ".into()));
        }
        let heights: Vec<usize> = values.iter().map(|v| v.dims2().0).collect();
        let out = Tensor::concat_rows(&values);
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(heights.len());
                let mut start = 0;
                for &h in &heights {
                    grads.push(g.slice_rows(start, start + h));
                    start += h;
                }
                grads
            })),
        ))
    }

    /// Assembles a new matrix whose row `k` is row `sources[k].1` of node
    /// `sources[k].0`. Used to reorder grouped attention outputs back into
    /// token order.
    pub fn gather_rows(&mut self, sources: &[(NodeId, usize)]) -> Result<NodeId, NnError> {
        let d = self.value(sources[0].0).dims2().1;
        let mut parents: Vec<NodeId> = Vec::new();
        let mut parent_slot = Vec::with_capacity(sources.len());
        for &(id, row) in sources {
            let v = self.value(id);
            let (h, w) = v.dims2();
            if w != d {
                return Err(NnError::Shape("gather_rows: col counts differ".into()));
            }
            if row >= h {
                return Err(NnError::Shape(format!(
                    "gather_rows: row {row} out of {h}"
                )));
            }
            let slot = match parents.iter().position(|&p| p == id) {
                Some(s) => s,
                None => {
                    parents.push(id);
                    parents.len() - 1
                }
            };
            parent_slot.push((slot, row));
        }
        let mut out = Tensor::zeros(&[sources.len(), d]);
        for (k, &(id, row)) in sources.iter().enumerate() {
            out.data_mut()[k * d..(k + 1) * d].copy_from_slice(self.value(id).row(row));
        }
        let parent_shapes: Vec<(usize, usize)> =
            parents.iter().map(|&p| self.value(p).dims2()).collect();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut grads: Vec<Tensor<S>> = parent_shapes
                    .iter()
                    .map(|&(h, w)| Tensor::zeros(&[h, w]))
                    .collect();
                for (k, &(slot, row)) in parent_slot.iter().enumerate() {
                    let gr = g.row(k);
                    let w = parent_shapes[slot].1;
                    let drow = &mut grads[slot].data_mut()[row * w..(row + 1) * w];
                    for (o, &v) in drow.iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                grads
            })),
        ))
    }

    /// Mean over rows, shape `[1,d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let out = xv.mean_rows();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let inv = S::from_f64(1.0 / n as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let gr = g.row(0);
                for i in 0..n {
                    let drow = &mut dx.data_mut()[i * d..(i + 1) * d];
                    for (o, &v) in drow.iter_mut().zip(gr) {
                        *o = v * inv;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Summed cross entropy over rows: `sum_i (logsumexp(logits_i) - logits_i[target_i])`.
    /// Callers divide by their own counts to get means.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, NnError> {
        let lv = self.value(logits).clone();
        let (n, k) = lv.dims2();
        if targets.len() != n {
            return Err(NnError::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= k {
                return Err(NnError::Shape(format!(
                    "cross_entropy: target {t} out of {k} classes"
                )));
            }
        }
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            total += lse - row[t];
        }
        let targets_owned: Vec<usize> = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            vec![logits],
            Some(Box::new(move |g| {
                let gs = g.item();
                let mut dl = Tensor::zeros(&[n, k]);
                for (i, &t) in targets_owned.iter().enumerate() {
                    let row = lv.row(i);
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let denom: S = row.iter().map(|&v| (v - mx).exp()).sum();
                    let drow = &mut dl.data_mut()[i * k..(i + 1) * k];
                    for j in 0..k {
                        let p = (row[j] - mx).exp() / denom;
                        let delta = if j == t { S::one() } else { S::zero() };
                        drow[j] = gs * (p - delta);
                    }
                }
                vec![dl]
            })),
        ))
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; look up
    /// leaves with [`Grads::get`].
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>, NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(back) = &node.back else {
                continue;
            };
            let parent_grads = back(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid.0] {
                    Some(existing) => existing.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::rand_uniform(rng, shape, -1.0, 1.0)
    }

    /// Central finite differences of `f` w.r.t. the tensor at `slot` in `inputs`.
    fn fd_grad(
        inputs: &[Tensor<f64>],
        slot: usize,
        f: &dyn Fn(&[Tensor<f64>]) -> f64,
    ) -> Tensor<f64> {
        let eps = 1e-6;
        let mut grad = Tensor::zeros(inputs[slot].shape());
        for i in 0..inputs[slot].numel() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[i] -= eps;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grad
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "gradients differ: {x} vs {y}"
            );
        }
    }

    /// Scalar loss used to exercise each op: sum of squares of the op output.
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) {
        let forward = |vals: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).data().iter().map(|v| v * v).sum()
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        // loss = sum(out^2), so the seed gradient at `out` is 2*out.
        let grads = backward_with_seed(&tape, out, tape.value(out).scale(2.0));
        for slot in 0..inputs.len() {
            if let Some(g) = grads.grads[ids[slot].0].as_ref() {
                let fd = fd_grad(&inputs, slot, &forward);
                assert_close(g, &fd, 1e-5);
            }
        }
    }

    /// Backward from an arbitrary node with an explicit seed gradient (test-only).
    fn backward_with_seed(tape: &Tape<f64>, node: NodeId, seed: Tensor<f64>) -> Grads<f64> {
        let mut grads: Vec<Option<Tensor<f64>>> = (0..tape.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(seed);
        for idx in (0..=node.0).rev() {
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let n = &tape.nodes[idx];
            let Some(back) = &n.back else { continue };
            let parent_grads = back(g);
            for (pid, pg) in n.parents.iter().zip(parent_grads) {
                match &mut grads[pid.0] {
                    Some(existing) => existing.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn linear_zero_input_gives_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).row(i), &[0.5, -0.5]);
        }
    }

    #[test]
    fn linear_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rt(&mut rng, &[3, 4]);
        let w = rt(&mut rng, &[5, 4]);
        let b = rt(&mut rng, &[5]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.linear(xi, wi, Some(bi)).unwrap();
        for i in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for p in 0..4 {
                    acc += w.at(o, p) * x.at(i, p);
                }
                assert!((tape.value(y).at(i, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        assert!(tape.linear(x, w, None).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x, None);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let a = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.7, 1.7 + 0.3]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.3]).unwrap());
        let ya = tape.softmax_rows(a, None);
        let yb = tape.softmax_rows(b, None);
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rt(&mut rng, &[1, 5]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.softmax_rows(xi, None);
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (got, &v) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - v.exp() / denom).abs() < 1e-12);
        }
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![5.0, 1.0, 2.0, 0.0, 9.0, 1.0]).unwrap());
        let mask = Arc::new(vec![true, false, true, true, true, false]);
        let y = tape.softmax_rows(x, Some(mask));
        let v = tape.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy_sum(logits, &[2]).unwrap();
        assert!((tape.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_logit_is_tiny() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![20.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy_sum(logits, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rt(&mut rng, &[1, 6]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let l = tape.cross_entropy_sum(xi, &[3]).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        let want = -(x.data()[3].exp() / denom).ln();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.cross_entropy_sum(logits, &[3]).is_err());
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn sum_of_params_has_all_ones_grad() {
        // loss = sum(W) via CE-free path: mean_rows then matmul with ones.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
        let ones_right = tape.leaf(Tensor::full(&[3, 1], 1.0));
        let row_sums = tape.matmul(w, ones_right).unwrap(); // [2,1]
        let ones_left = tape.leaf(Tensor::full(&[1, 2], 1.0));
        let total = tape.matmul(ones_left, row_sums).unwrap(); // [1,1]
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
        // A leaf never touched by the loss keeps no gradient at all.
        let mut tape2 = Tape::<f64>::new();
        let unused = tape2.leaf(Tensor::zeros(&[2, 2]));
        let x = tape2.leaf(Tensor::scalar(1.0));
        let y = tape2.scale(x, 3.0);
        let grads2 = tape2.backward(y).unwrap();
        assert!(grads2.get(unused).is_none());
    }

    #[test]
    fn fd_check_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        check_op(
            vec![rt(&mut rng, &[3, 4]), rt(&mut rng, &[2, 4]), rt(&mut rng, &[2])],
            |tape, ids| tape.linear(ids[0], ids[1], Some(ids[2])).unwrap(),
        );
    }

    #[test]
    fn fd_check_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        check_op(
            vec![rt(&mut rng, &[2, 3]), rt(&mut rng, &[3, 4])],
            |tape, ids| tape.matmul(ids[0], ids[1]).unwrap(),
        );
        check_op(
            vec![rt(&mut rng, &[2, 3]), rt(&mut rng, &[4, 3])],
            |tape, ids| tape.matmul_nt(ids[0], ids[1]).unwrap(),
        );
    }

    #[test]
    fn fd_check_softmax_gelu_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        check_op(vec![rt(&mut rng, &[3, 5])], |tape, ids| {
            tape.softmax_rows(ids[0], None)
        });
        check_op(vec![rt(&mut rng, &[3, 4])], |tape, ids| tape.gelu(ids[0]));
        check_op(vec![rt(&mut rng, &[4, 3])], |tape, ids| tape.mean_rows(ids[0]));
    }

    #[test]
    fn fd_check_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        check_op(
            vec![
                rt(&mut rng, &[3, 6]),
                Tensor::rand_uniform(&mut rng, &[6], 0.5, 1.5),
                rt(&mut rng, &[6]),
            ],
            |tape, ids| tape.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
        );
    }

    #[test]
    fn fd_check_embedding_slice_concat_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        check_op(vec![rt(&mut rng, &[5, 3])], |tape, ids| {
            tape.embedding(ids[0], &[1, 4, 1, 0]).unwrap()
        });
        check_op(vec![rt(&mut rng, &[4, 6])], |tape, ids| {
            let a = tape.slice_cols(ids[0], 1, 4).unwrap();
            let b = tape.slice_rows(ids[0], 0, 2).unwrap();
            let c = tape.slice_rows(ids[0], 2, 4).unwrap();
            let rows = tape.concat_rows(&[b, c]).unwrap();
            let cols = tape.slice_cols(rows, 0, 3).unwrap();
            let j = tape.concat_cols(&[a, cols]).unwrap();
            j
        });
        check_op(
            vec![rt(&mut rng, &[3, 4]), rt(&mut rng, &[2, 4])],
            |tape, ids| {
                tape.gather_rows(&[(ids[0], 2), (ids[1], 0), (ids[0], 2), (ids[1], 1)])
                    .unwrap()
            },
        );
    }

    #[test]
    fn fd_check_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mask = Arc::new(vec![true, true, false, true, false, true]);
        check_op(vec![rt(&mut rng, &[2, 3])], move |tape, ids| {
            tape.softmax_rows(ids[0], Some(mask.clone()))
        });
    }

    #[test]
    fn fd_check_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let inputs = vec![rt(&mut rng, &[3, 5])];
        let targets = vec![0usize, 4, 2];
        let forward = |vals: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(vals[0].clone());
            let l = tape.cross_entropy_sum(x, &targets).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(inputs[0].clone());
        let l = tape.cross_entropy_sum(x, &targets).unwrap();
        let grads = tape.backward(l).unwrap();
        let fd = fd_grad(&inputs, 0, &forward);
        assert_close(grads.get(x).unwrap(), &fd, 1e-5);
    }
}
