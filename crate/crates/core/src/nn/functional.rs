//! Tensor-in, tensor-out wrappers around the tape operations, for callers
//! that only need a forward value.

use std::rc::Rc;

use super::layers::{AdditivePool, MultiHeadAttention};
use crate::autodiff::{AttnLayout, Mode, SeqLayout, Tape};
use crate::error::{shape_err, Error, Result};
use crate::params::ParameterStore;
use rand::RngCore;

use crate::rng::SeedStream;
use crate::tensor::{Real, Tensor};

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for a single sequence pair.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(shape_err!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention(
        qv,
        kv,
        vv,
        1,
        Rc::new(AttnLayout::single(q.rows(), k.rows())),
    )?;
    Ok(tape.value(out).clone())
}

/// Multi-head attention with the parameters stored under `prefix`
/// (`wq`, `wk`, `wv`, `wo`).
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    n_heads: usize,
) -> Result<Tensor<T>> {
    let mha = MultiHeadAttention::new(prefix, q.cols(), n_heads)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = mha.forward(
        &mut tape,
        store,
        qv,
        kv,
        vv,
        Rc::new(AttnLayout::single(q.rows(), k.rows())),
    )?;
    Ok(tape.value(out).clone())
}

/// Additive attention pooling of the rows of `x`; returns the pooled vector
/// and the attention weights.
pub fn additive_attention_pool<T: Real>(
    x: &Tensor<T>,
    store: &ParameterStore<T>,
    prefix: &str,
) -> Result<(Tensor<T>, Vec<T>)> {
    let hidden = store.value(&format!("{prefix}.w1.w"))?.cols();
    let pool = AdditivePool::new(prefix, x.cols(), hidden);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = pool.forward(&mut tape, store, xv, Rc::new(SeqLayout::single(x.rows())))?;
    let weights = tape
        .pool_weights(out)
        .map(<[T]>::to_vec)
        .unwrap_or_default();
    let pooled = tape.value(out).clone().reshape([x.cols()])?;
    Ok((pooled, weights))
}

/// Row-wise `(s - mean) / sqrt(var + eps)` of `s = x + delta`.
pub fn residual_layer_norm<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if x.shape() != delta.shape() {
        return Err(shape_err!(
            "residual {:?} vs {:?}",
            x.shape(),
            delta.shape()
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer norm eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(delta.clone()));
    let s = tape.add(a, b)?;
    let y = tape.layer_norm(s, eps);
    Ok(tape.value(y).clone())
}

/// Inverted dropout: in training, zero each entry with probability `rate`
/// and scale survivors by `1 / (1 - rate)`; identity in eval mode.
pub fn dropout_gate<T: Real>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut SeedStream,
) -> Result<Tensor<T>> {
    let mut tape = Tape::with_mode(mode, SeedStream::new(rng.next_u64()));
    let xv = tape.constant(x.clone());
    let y = tape.dropout(xv, rate)?;
    Ok(tape.value(y).clone())
}
