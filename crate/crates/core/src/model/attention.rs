//! Scaled dot-product attention and its multi-head composition.

use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::{Tape, Tensor, Var};

/// Additive pre-softmax penalty for masked positions. Large enough that
/// `exp(x - rowmax)` underflows to exactly 0, making causal masking exact.
pub const MASK_NEG: f64 = -1e9;

/// `softmax(Q K^T / sqrt(d_k) + mask) V` with Q: m x d_k, K: n x d_k,
/// V: n x d_v; `mask` (m x n of 0 / MASK_NEG) is added before the softmax.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::DimMismatch { op: "self_attention", lhs: qs, rhs: ks });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let attn = tape.softmax(scores, 1)?;
    tape.matmul(attn, v)
}

/// Lower-triangular mask: position i may attend to positions <= i.
pub fn causal_mask(tape: &mut Tape, m: usize) -> Var {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            data[i * m + j] = MASK_NEG;
        }
    }
    tape.constant(Tensor::from_vec(vec![m, m], data).expect("square mask"))
}

/// Multi-head attention: full-width Q/K/V projections, per-head column
/// slices through [`self_attention`], concatenation, output projection.
/// Binds parameters `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
pub fn multi_head(
    tape: &mut Tape,
    params: &Params,
    prefix: &str,
    n_heads: usize,
    q_in: Var,
    kv_in: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let d_model = tape.value(q_in).cols();
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!("{d_model} dims not divisible into {n_heads} heads")));
    }
    let d_head = d_model / n_heads;
    let m = tape.value(q_in).rows();
    let n = tape.value(kv_in).rows();

    let proj = |tape: &mut Tape, x: Var, which: &str| -> Result<Var> {
        let w = tape.param(&format!("{prefix}.w{which}"), params.get(&format!("{prefix}.w{which}")));
        let b = tape.param(&format!("{prefix}.b{which}"), params.get(&format!("{prefix}.b{which}")));
        let p = tape.matmul(x, w)?;
        tape.add_bias(p, b)
    };
    let q = proj(tape, q_in, "q")?;
    let k = proj(tape, kv_in, "k")?;
    let v = proj(tape, kv_in, "v")?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, &[0, h * d_head], &[m, d_head])?;
        let kh = tape.slice(k, &[0, h * d_head], &[n, d_head])?;
        let vh = tape.slice(v, &[0, h * d_head], &[n, d_head])?;
        heads.push(self_attention(tape, qh, kh, vh, mask)?);
    }
    let cat = tape.concat(1, &heads)?;
    let wo = tape.param(&format!("{prefix}.wo"), params.get(&format!("{prefix}.wo")));
    let bo = tape.param(&format!("{prefix}.bo"), params.get(&format!("{prefix}.bo")));
    let out = tape.matmul(cat, wo)?;
    tape.add_bias(out, bo)
}
