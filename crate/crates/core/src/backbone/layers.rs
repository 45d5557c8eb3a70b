use std::f64::consts::TAU;

use crate::error::{dim_err, Result};
use crate::gradcore::{Tensor, Var};

/// Guard added to the squared query/key norm. Small enough that rescaling a
/// query by 1e-3 still leaves the attention weights unchanged to ~1e-15.
pub const QK_EPS: f64 = 1e-20;
pub const LN_EPS: f64 = 1e-6;

/// `[sin(2π·f·t) …, cos(2π·f·t) …]` for each `t`, shape `[B, 2F]`.
pub fn gaussian_fourier_embed(t: &[f64], freqs: &Tensor) -> Result<Tensor> {
    let f = freqs.data();
    let mut out = Vec::with_capacity(t.len() * 2 * f.len());
    for &ti in t {
        out.extend(f.iter().map(|fk| (TAU * fk * ti).sin()));
        out.extend(f.iter().map(|fk| (TAU * fk * ti).cos()));
    }
    Tensor::new(vec![t.len(), 2 * f.len()], out)
}

/// Broadcast a bias `[n]` over every leading axis of `x: [.., n]`.
pub fn add_bias<'t>(x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let n = *shape.last().ok_or_else(|| dim_err!("bias on a rank-0 tensor"))?;
    if b.shape() != [n] {
        return Err(dim_err!("bias {:?} does not match width {n}", b.shape()));
    }
    let mut view = vec![1; shape.len()];
    view[shape.len() - 1] = n;
    x.add(&b.reshape(view)?.expand(shape)?)
}

/// `x·W (+ b)` over the last axis.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(&w)?;
    match b {
        Some(b) => add_bias(y, b),
        None => Ok(y),
    }
}

/// Repeat per-sample rows `[B, h]` over `steps` tokens: `[B, steps, h]`.
pub fn per_token<'t>(rows: Var<'t>, steps: usize) -> Result<Var<'t>> {
    let s = rows.shape();
    if s.len() != 2 {
        return Err(dim_err!("expected [B, h], got {s:?}"));
    }
    rows.reshape([s[0], 1, s[1]])?.expand([s[0], steps, s[1]])
}

/// `layer_norm(x)·(1 + scale) + shift`, with `shift`, `scale: [B, h]` shared
/// by all tokens of a sample.
pub fn adaln_modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    let steps = x.shape()[1];
    let normed = x.layer_norm(LN_EPS)?;
    normed.mul(&per_token(scale.offset(1.0)?, steps)?)?.add(&per_token(shift, steps)?)
}

/// `x + gate·branch`, the AdaLN-Zero residual; a zero gate leaves `x` untouched.
pub fn gated_residual<'t>(x: Var<'t>, gate: Var<'t>, branch: Var<'t>) -> Result<Var<'t>> {
    let steps = x.shape()[1];
    x.add(&per_token(gate, steps)?.mul(&branch)?)
}

/// Projection weights of one attention layer. `temperature` has shape `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
    pub temperature: Var<'t>,
}

pub struct Attention<'t> {
    pub out: Var<'t>,
    /// `[B, H, T, S]`
    pub weights: Var<'t>,
    /// `[B, H, T, S]`, each bounded by the temperature.
    pub logits: Var<'t>,
}

fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, n, h) = (s[0], s[1], s[2]);
    if h % heads != 0 {
        return Err(dim_err!("width {h} not divisible by {heads} heads"));
    }
    x.reshape([b, n, heads, h / heads])?.permute(&[0, 2, 1, 3])
}

/// Multi-head attention of `queries: [B, T, h]` over `context: [B, S, h]`
/// with per-head L2-normalized queries and keys, so every logit lies in
/// `[−s, s]` for the learned temperature `s`. No residual is added here.
pub fn qknorm_attention<'t>(
    queries: Var<'t>,
    context: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Result<Attention<'t>> {
    let (qs, cs) = (queries.shape(), context.shape());
    if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
        return Err(dim_err!("attention over {qs:?} and {cs:?}"));
    }
    let q = split_heads(queries.matmul(&w.wq)?, heads)?.l2_normalize(QK_EPS)?;
    let k = split_heads(context.matmul(&w.wk)?, heads)?.l2_normalize(QK_EPS)?;
    let v = split_heads(context.matmul(&w.wv)?, heads)?;
    let logits = q.matmul(&k.transpose()?)?.mul(&w.temperature)?;
    let weights = logits.softmax()?;
    let mixed = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(qs.clone())?;
    Ok(Attention { out: mixed.matmul(&w.wo)?, weights, logits })
}

/// Two-layer SiLU MLP applied per token.
pub fn mlp<'t>(x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>) -> Result<Var<'t>> {
    linear(linear(x, w1, Some(b1))?.silu()?, w2, Some(b2))
}
