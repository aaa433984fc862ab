//! Scaled dot-product attention split across heads.

use alloc::vec;
use alloc::vec::Vec;

use super::params::AttnIdx;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tape::{Tape, Var};

/// Attention projection weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnVars {
    pub fn bind(idx: &AttnIdx, bound: &Bound) -> Self {
        Self {
            wq: bound.var(idx.wq),
            bq: bound.var(idx.bq),
            wk: bound.var(idx.wk),
            bk: bound.var(idx.bk),
            wv: bound.var(idx.wv),
            bv: bound.var(idx.bv),
            wo: bound.var(idx.wo),
            bo: bound.var(idx.bo),
        }
    }
}

/// `x · w + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Lower-triangular (including the diagonal) mask for `len` positions.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

/// Same key mask repeated for every one of `rows` queries.
pub fn key_mask(rows: usize, keys_allowed: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * keys_allowed.len());
    for _ in 0..rows {
        m.extend_from_slice(keys_allowed);
    }
    m
}

/// Attention over already projected queries, keys and values.
///
/// For each head `h`, `softmax(Q_h K_hᵀ / √d_k) V_h` with forbidden
/// positions excluded from the softmax; heads are concatenated back to
/// `[L_q×d]`. Per-head probability matrices are pushed to `probs` when given.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    allowed: Option<&[bool]>,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (lq, d) = tape.value(q).dims2()?;
    let (lk, dk_total) = tape.value(k).dims2()?;
    if dk_total != d || tape.value(v).shape() != [lk, d] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(alloc::format!("{d} is not divisible into {n_heads} heads")));
    }
    let full;
    let allowed = match allowed {
        Some(m) => m,
        None => {
            full = vec![true; lq * lk];
            &full
        }
    };
    let dk = d / n_heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.masked_softmax(scores, allowed)?;
        if let Some(out) = probs.as_deref_mut() {
            out.push(p);
        }
        heads.push(tape.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// Full multi-head attention: input projections, [`attend`], output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttnVars,
    n_heads: usize,
    allowed: Option<&[bool]>,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let q = linear(tape, q_in, w.wq, w.bq)?;
    let k = linear(tape, k_in, w.wk, w.bk)?;
    let v = linear(tape, v_in, w.wv, w.bv)?;
    let ctx = attend(tape, q, k, v, n_heads, allowed, probs)?;
    linear(tape, ctx, w.wo, w.bo)
}
