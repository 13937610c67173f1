//! Proximal mapping: a stack of transformer blocks, or a classical prox.

use std::fmt;
use std::str::FromStr;

use crate::attention::{Gdfn, Mdta};
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, ParamBuilder, Var};
use crate::scalar::Scalar;

/// `x + MDTA(LN(x))`, then `+ GDFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Mdta,
    pub norm2: LayerNorm,
    pub ffn: Gdfn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&mut pb.child("norm1"), channels)?,
            attn: Mdta::new(&mut pb.child("attn"), channels, heads, zero_out)?,
            norm2: LayerNorm::new(&mut pb.child("norm2"), channels)?,
            ffn: Gdfn::new(&mut pb.child("ffn"), channels, zero_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProxConfig {
    Learned,
    /// Prox of `threshold·‖·‖₁`; `threshold` plays the role of `ρλ`.
    SoftThreshold { threshold: f64 },
    Identity,
}

impl ProxConfig {
    /// Builds from a mode name and an optional threshold; the threshold is
    /// required for `soft_threshold` and rejected otherwise.
    pub fn from_parts(mode: &str, threshold: Option<f64>) -> Result<Self> {
        match (mode, threshold) {
            ("learned", None) => Ok(ProxConfig::Learned),
            ("identity", None) => Ok(ProxConfig::Identity),
            ("soft_threshold", Some(t)) if t >= 0.0 && t.is_finite() => Ok(ProxConfig::SoftThreshold { threshold: t }),
            ("soft_threshold", Some(t)) => Err(Error::Config(format!("soft threshold must be non-negative, got {t}"))),
            ("soft_threshold", None) => Err(Error::Config("soft_threshold mode needs a threshold".into())),
            ("learned" | "identity", Some(_)) => Err(Error::Config(format!("{mode} mode takes no threshold"))),
            _ => Err(Error::Config(format!("unknown prox mode {mode:?}"))),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            ProxConfig::Learned => "learned",
            ProxConfig::SoftThreshold { .. } => "soft_threshold",
            ProxConfig::Identity => "identity",
        }
    }
}

impl fmt::Display for ProxConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProxConfig::SoftThreshold { threshold } => write!(f, "soft_threshold:{threshold}"),
            other => f.write_str(other.mode_name()),
        }
    }
}

impl FromStr for ProxConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((m, t)) => {
                let t = t.trim().parse().map_err(|_| Error::Config(format!("bad threshold in {s:?}")))?;
                ProxConfig::from_parts(m.trim(), Some(t))
            }
            None => ProxConfig::from_parts(s.trim(), None),
        }
    }
}

/// One stage's proximal module.
#[derive(Clone, Debug)]
pub struct Pmm {
    pub cfg: ProxConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Pmm {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: ProxConfig,
        channels: usize,
        heads: usize,
        blocks: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let blocks = match cfg {
            ProxConfig::Learned if blocks == 0 => {
                return Err(Error::Config("learned prox needs at least one block".into()));
            }
            ProxConfig::Learned => (0..blocks)
                .map(|i| TransformerBlock::new(&mut pb.child(&format!("block{i}")), channels, heads, zero_out))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Pmm { cfg, blocks })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        pmm_forward(g, z, self)
    }
}

pub fn pmm_forward<T: Scalar>(g: &mut Graph<'_, T>, z: Var, pmm: &Pmm) -> Result<Var> {
    match pmm.cfg {
        ProxConfig::Identity => Ok(z),
        ProxConfig::SoftThreshold { threshold } => Ok(g.soft_threshold(z, T::of(threshold))),
        ProxConfig::Learned => {
            let mut x = z;
            for b in &pmm.blocks {
                x = b.forward(g, x)?;
            }
            Ok(x)
        }
    }
}
