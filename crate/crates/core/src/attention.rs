//! Multi-head transposed (channel) attention.
//!
//! Attention is computed between channels: per head, the `c×c` matrix
//! `softmax(t · q̂ k̂ᵀ)` with `q̂, k̂` the spatially L2-normalized query and key
//! rows, applied to the value rows.

use crate::error::{Error, Result};
use crate::nn::{Conv1x1, DwConv3, Graph, ParamBuilder, ParamId, Var};
use crate::scalar::Scalar;

/// `C/16` heads, at least one.
pub fn default_heads(channels: usize) -> usize {
    (channels / 16).max(1)
}

pub fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
    }
    Ok(())
}

/// 1×1 conv followed by a 3×3 depth-wise conv.
#[derive(Clone, Debug)]
pub struct PwDw {
    pub pw: Conv1x1,
    pub dw: DwConv3,
}

impl PwDw {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        Ok(PwDw { pw: Conv1x1::new(&mut pb.child("pw"), cin, cout)?, dw: DwConv3::new(&mut pb.child("dw"), cout)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.pw.forward(g, x)?;
        self.dw.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Mdta {
    pub channels: usize,
    pub heads: usize,
    pub q: PwDw,
    pub k: PwDw,
    pub v: PwDw,
    /// One learnable scale per head, initialized to 1.
    pub temperature: ParamId,
    pub out: Conv1x1,
}

/// Output plus the per-head attention matrices, for inspection.
pub struct MdtaOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl Mdta {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, zero_out: bool) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Mdta {
            channels,
            heads,
            q: PwDw::new(&mut pb.child("q"), channels, channels)?,
            k: PwDw::new(&mut pb.child("k"), channels, channels)?,
            v: PwDw::new(&mut pb.child("v"), channels, channels)?,
            temperature: pb.full("temperature", &[heads], 1.0)?,
            out: if zero_out {
                Conv1x1::zeros(&mut pb.child("out"), channels, channels)?
            } else {
                Conv1x1::new(&mut pb.child("out"), channels, channels)?
            },
        })
    }

    /// Self-attention.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.attend(g, x, x, x)?.out)
    }

    /// Query, key and value projections are applied to the three sources.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, qs: Var, ks: Var, vs: Var) -> Result<MdtaOutput> {
        let shape = g.shape(qs).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("attention expects [C,H,W], got {shape:?}")));
        };
        if c != self.channels {
            return Err(Error::Shape(format!("attention built for {} channels, got {c}", self.channels)));
        }
        if g.shape(ks) != shape.as_slice() || g.shape(vs) != shape.as_slice() {
            return Err(Error::Shape(format!("attention sources differ: {:?} {:?} {:?}", shape, g.shape(ks), g.shape(vs))));
        }
        let n = h * w;
        let q = self.q.forward(g, qs)?;
        let k = self.k.forward(g, ks)?;
        let v = self.v.forward(g, vs)?;
        let q = g.reshape(q, &[c, n])?;
        let k = g.reshape(k, &[c, n])?;
        let v = g.reshape(v, &[c, n])?;
        let temp = g.param(self.temperature);
        let ch = c / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, hd * ch, ch)?, g.slice(k, hd * ch, ch)?, g.slice(v, hd * ch, ch)?)
            };
            let qh = g.l2_normalize_rows(qh);
            let kh = g.l2_normalize_rows(kh);
            let logits = g.matmul_t(qh, false, kh, true)?;
            let t = if self.heads == 1 { temp } else { g.slice(temp, hd, 1)? };
            let logits = g.mul_scalar(logits, t)?;
            let a = g.softmax(logits);
            attention.push(a);
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        let cat = g.reshape(cat, &[c, h, w])?;
        let out = self.out.forward(g, cat)?;
        Ok(MdtaOutput { out, attention })
    }
}

/// Gated feed-forward: `out(gelu(a) ⊙ b)` with `a, b` from two 1×1→dw paths.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub hidden: usize,
    pub gate: PwDw,
    pub value: PwDw,
    pub out: Conv1x1,
}

pub const GDFN_EXPANSION: f64 = 2.66;

impl Gdfn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, zero_out: bool) -> Result<Self> {
        let hidden = ((channels as f64 * GDFN_EXPANSION).round() as usize).max(1);
        Ok(Gdfn {
            hidden,
            gate: PwDw::new(&mut pb.child("gate"), channels, hidden)?,
            value: PwDw::new(&mut pb.child("value"), channels, hidden)?,
            out: if zero_out {
                Conv1x1::zeros(&mut pb.child("out"), hidden, channels)?
            } else {
                Conv1x1::new(&mut pb.child("out"), hidden, channels)?
            },
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.gate.forward(g, x)?;
        let a = g.gelu(a);
        let b = self.value.forward(g, x)?;
        let p = g.mul(a, b)?;
        self.out.forward(g, p)
    }
}
