//! Attention and pre-norm transformer layers, plus parameter initialization.
//!
//! Parameters are registered into a [`ParameterStore`] under dotted path
//! prefixes ("enc.0.attn.wq", ...) and bound to tape leaves per forward pass.

use std::sync::Arc;

use rand::Rng;

use super::params::{ParameterStore, TapeParams};
use super::tape::{NodeId, Tape};
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const FFN_MULT: usize = 4;

/// Xavier-uniform init for a `[d_out, d_in]` projection.
pub fn xavier<S: Scalar, R: Rng>(rng: &mut R, d_out: usize, d_in: usize) -> Tensor<S> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    Tensor::rand_uniform(rng, &[d_out, d_in], -limit, limit)
}

pub fn register_linear<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut R,
) {
    store.insert(&format!("{prefix}.w"), xavier(rng, d_out, d_in));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

/// Classifier heads start near zero so untrained logits sit close to uniform.
pub fn register_head<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut R,
) {
    store.insert(
        &format!("{prefix}.w"),
        Tensor::rand_normal(rng, &[d_out, d_in], 0.0, 0.02),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

pub fn register_layer_norm<S: Scalar>(store: &mut ParameterStore<S>, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.g"), Tensor::full(&[d], S::one()));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub fn register_attention<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) {
    for name in ["q", "k", "v", "o"] {
        register_linear(store, &format!("{prefix}.{name}"), d, d, rng);
    }
}

pub fn register_encoder_layer<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) {
    register_layer_norm(store, &format!("{prefix}.ln1"), d);
    register_attention(store, &format!("{prefix}.attn"), d, rng);
    register_layer_norm(store, &format!("{prefix}.ln2"), d);
    register_linear(store, &format!("{prefix}.ffn.lin1"), d * FFN_MULT, d, rng);
    register_linear(store, &format!("{prefix}.ffn.lin2"), d, d * FFN_MULT, rng);
}

pub fn register_decoder_layer<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) {
    register_layer_norm(store, &format!("{prefix}.ln1"), d);
    register_attention(store, &format!("{prefix}.self_attn"), d, rng);
    register_layer_norm(store, &format!("{prefix}.ln2"), d);
    register_attention(store, &format!("{prefix}.cross_attn"), d, rng);
    register_layer_norm(store, &format!("{prefix}.ln3"), d);
    register_linear(store, &format!("{prefix}.ffn.lin1"), d * FFN_MULT, d, rng);
    register_linear(store, &format!("{prefix}.ffn.lin2"), d, d * FFN_MULT, rng);
}

/// Tape-bound projection weights of one attention block.
pub struct AttnParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub fn bind_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    prefix: &str,
) -> Result<AttnParams, NnError> {
    let mut get = |suffix: &str, tape: &mut Tape<S>| -> Result<NodeId, NnError> {
        bind.node(tape, store, &format!("{prefix}.{suffix}"))
    };
    Ok(AttnParams {
        wq: get("q.w", tape)?,
        bq: get("q.b", tape)?,
        wk: get("k.w", tape)?,
        bk: get("k.b", tape)?,
        wv: get("v.w", tape)?,
        bv: get("v.b", tape)?,
        wo: get("o.w", tape)?,
        bo: get("o.b", tape)?,
    })
}

/// Lower-triangular mask for decoder self-attention over `n` positions.
pub fn causal_mask(n: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    Arc::new(m)
}

/// Scaled dot-product multi-head attention. Queries come from `q_in`
/// (`[q, d]`), keys and values from `kv_in` (`[k, d]`). `mask` is `q*k`
/// row-major with `true` marking attendable positions.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q_in: NodeId,
    kv_in: NodeId,
    p: &AttnParams,
    heads: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<NodeId, NnError> {
    let d = tape.value(q_in).dims2().1;
    if heads == 0 || d % heads != 0 {
        return Err(NnError::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = tape.linear(q_in, p.wq, Some(p.bq))?;
    let k = tape.linear(kv_in, p.wk, Some(p.bk))?;
    let v = tape.linear(kv_in, p.wv, Some(p.bv))?;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled, mask.clone());
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&head_outputs)?;
    tape.linear(ctx, p.wo, Some(p.bo))
}

/// Pre-norm encoder layer: self-attention and feed-forward, each behind a
/// layer norm with a residual connection.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId, NnError> {
    let ln1_g = bind.node(tape, store, &format!("{prefix}.ln1.g"))?;
    let ln1_b = bind.node(tape, store, &format!("{prefix}.ln1.b"))?;
    let normed = tape.layer_norm(x, ln1_g, ln1_b)?;
    let attn = bind_attention(tape, bind, store, &format!("{prefix}.attn"))?;
    let sa = multi_head_attention(tape, normed, normed, &attn, heads, None)?;
    let x = tape.add(x, sa)?;
    feed_forward(tape, bind, store, prefix, x)
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over
/// `memory`, then feed-forward.
pub fn decoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    prefix: &str,
    x: NodeId,
    memory: NodeId,
    heads: usize,
) -> Result<NodeId, NnError> {
    let n = tape.value(x).dims2().0;
    let ln1_g = bind.node(tape, store, &format!("{prefix}.ln1.g"))?;
    let ln1_b = bind.node(tape, store, &format!("{prefix}.ln1.b"))?;
    let normed = tape.layer_norm(x, ln1_g, ln1_b)?;
    let self_attn = bind_attention(tape, bind, store, &format!("{prefix}.self_attn"))?;
    let sa = multi_head_attention(tape, normed, normed, &self_attn, heads, Some(causal_mask(n)))?;
    let x = tape.add(x, sa)?;

    let ln2_g = bind.node(tape, store, &format!("{prefix}.ln2.g"))?;
    let ln2_b = bind.node(tape, store, &format!("{prefix}.ln2.b"))?;
    let normed = tape.layer_norm(x, ln2_g, ln2_b)?;
    let cross_attn = bind_attention(tape, bind, store, &format!("{prefix}.cross_attn"))?;
    let ca = multi_head_attention(tape, normed, memory, &cross_attn, heads, None)?;
    let x = tape.add(x, ca)?;

    let lnf_g = bind.node(tape, store, &format!("{prefix}.ln3.g"))?;
    let lnf_b = bind.node(tape, store, &format!("{prefix}.ln3.b"))?;
    let normed = tape.layer_norm(x, lnf_g, lnf_b)?;
    let h1 = bind.node(tape, store, &format!("{prefix}.ffn.lin1.w"))?;
    let h1b = bind.node(tape, store, &format!("{prefix}.ffn.lin1.b"))?;
    let h2 = bind.node(tape, store, &format!("{prefix}.ffn.lin2.w"))?;
    let h2b = bind.node(tape, store, &format!("{prefix}.ffn.lin2.b"))?;
    let hidden = tape.linear(normed, h1, Some(h1b))?;
    let act = tape.gelu(hidden);
    let ff = tape.linear(act, h2, Some(h2b))?;
    tape.add(x, ff)
}

/// The encoder layer's feed-forward half (layer norm, expand, GELU, project,
/// residual). The decoder inlines its own variant with `ln3` paths.
fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeParams,
    store: &ParameterStore<S>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let ln2_g = bind.node(tape, store, &format!("{prefix}.ln2.g"))?;
    let ln2_b = bind.node(tape, store, &format!("{prefix}.ln2.b"))?;
    let normed = tape.layer_norm(x, ln2_g, ln2_b)?;
    let h1 = bind.node(tape, store, &format!("{prefix}.ffn.lin1.w"))?;
    let h1b = bind.node(tape, store, &format!("{prefix}.ffn.lin1.b"))?;
    let h2 = bind.node(tape, store, &format!("{prefix}.ffn.lin2.w"))?;
    let h2b = bind.node(tape, store, &format!("{prefix}.ffn.lin2.b"))?;
    let hidden = tape.linear(normed, h1, Some(h1b))?;
    let act = tape.gelu(hidden);
    let ff = tape.linear(act, h2, Some(h2b))?;
    tape.add(x, ff)
}
