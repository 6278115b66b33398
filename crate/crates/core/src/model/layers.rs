//! Building blocks shared by the encoder variants and the decoder.

use std::sync::Arc;

use crate::error::{GlotError, Result};
use crate::numcore::{AttentionMask, ParamId, Tape, Tensor, Var};

/// Sinusoidal table: `PE[t][2i] = sin(t / 10000^{2i/d})`,
/// `PE[t][2i+1] = cos(t / 10000^{2i/d})`, `t` from 0.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(GlotError::Config(format!("positional encoding width must be even, got {d}")));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d, data)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm_rows(x, g, b, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MultiHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MultiHead {
    /// Scaled dot-product attention of `queries` over `keys_values`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys_values: Var,
        heads: usize,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let d = tape.value(queries).cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(GlotError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let (wq, wk, wv, wo) = (tape.param(self.w_q), tape.param(self.w_k), tape.param(self.w_v), tape.param(self.w_o));
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys_values, wk)?;
        let v = tape.matmul(keys_values, wv)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
            };
            let s = tape.masked_scores(qh, kh, mask, scale)?;
            let a = tape.masked_softmax_rows(s, mask)?;
            outs.push(tape.masked_weighted_sum(a, vh, mask)?);
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        tape.matmul(joined, wo)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout)?;
        self.outer.forward(tape, h)
    }
}

/// `g[p] = sigmoid(⟨w, lssa_out[p]⟩ + b)`, shape F×1. `w` is `d_b×1`, `b` a
/// 1-vector.
pub fn gate_value(tape: &mut Tape<'_>, lssa_out: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.matmul(lssa_out, w)?;
    let s = tape.add(s, b)?;
    tape.sigmoid(s)
}

/// Row `p` of the result is `g[p]·lssa_out[p] + (1 − g[p])·gap`.
pub fn gating_combine(tape: &mut Tape<'_>, g: Var, lssa_out: Var, gap: Var) -> Result<Var> {
    let (f, d) = tape.value(lssa_out).require_matrix("gating_combine")?;
    if tape.shape(g) != [f, 1] || tape.value(gap).len() != d {
        return Err(GlotError::shape(
            "gating_combine",
            format!("g {:?}, lssa {f}x{d}, gap {:?}", tape.shape(g), tape.shape(gap)),
        ));
    }
    let kept = tape.mul(lssa_out, g)?;
    let rest = tape.affine(g, -1.0, 1.0)?;
    let gap_rows = tape.broadcast_rows(gap, f)?;
    let pooled = tape.mul(gap_rows, rest)?;
    tape.add(kept, pooled)
}
