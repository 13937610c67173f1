//! Degradation-guided gradient step:
//! `ẑ = x̂ − ρ · Φᵀ(Φ̃(x̂, d) − ŷ)`.
//!
//! `Φ̃` is channel cross-attention whose key is retrieved from a learnable
//! per-level basis by softmax weights predicted from the degradation vector.
//! `Φᵀ` is channel self-attention.

use crate::attention::Mdta;
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamBuilder, ParamId, Var};
use crate::scalar::Scalar;

/// `ln(e^0.5 − 1)`, so that `softplus(raw) = 0.5`.
pub fn rho_raw_for(rho: f64) -> f64 {
    rho.exp_m1().ln()
}

/// Keys for one level: `M` channel vectors plus the retrieval projection.
#[derive(Clone, Debug)]
pub struct LevelKeys {
    pub keys: ParamId,
    pub num_keys: usize,
    pub channels: usize,
}

impl LevelKeys {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, num_keys: usize, channels: usize) -> Result<Self> {
        if num_keys == 0 {
            return Err(Error::Config("key database needs at least one key".into()));
        }
        let t = crate::nn::params::init::normal(pb.rng(), &[num_keys, channels], 0.5);
        let keys = pb.add("keys", t)?;
        Ok(LevelKeys { keys, num_keys, channels })
    }
}

/// Retrieval weights `softmax(Linear(d))` as a `[1, M]` row.
pub fn retrieval_weights<T: Scalar>(g: &mut Graph<'_, T>, d: Var, proj: &Linear) -> Result<Var> {
    let logits = proj.forward(g, d)?;
    let m = g.value(logits).len();
    let row = g.reshape(logits, &[1, m])?;
    Ok(g.softmax(row))
}

/// `Σ_m w_m K_m` for `w` `[1, M]`; returns a `[1, C]` row.
pub fn mix_keys<T: Scalar>(g: &mut Graph<'_, T>, weights: Var, keys: Var) -> Result<Var> {
    g.matmul(weights, keys)
}

/// `key = Σ softmax(Linear(d))_m · K_m`.
pub fn retrieve_key<T: Scalar>(g: &mut Graph<'_, T>, d: Var, db: &LevelKeys, proj: &Linear) -> Result<Var> {
    let dshape = g.shape(d).to_vec();
    let w = retrieval_weights(g, d, proj).map_err(|e| Error::Shape(format!("degradation vector {dshape:?}: {e}")))?;
    if g.shape(w)[1] != db.num_keys {
        return Err(Error::Shape(format!("retrieval gives {} weights for {} keys", g.shape(w)[1], db.num_keys)));
    }
    let keys = g.param(db.keys);
    mix_keys(g, w, keys)
}

/// `Φ̃(x̂, key)`: query and value from `x̂`, key from `x̂` shifted by the
/// spatially broadcast retrieved key.
#[derive(Clone, Debug)]
pub struct DegradationTransform {
    pub attn: Mdta,
}

impl DegradationTransform {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(DegradationTransform { attn: Mdta::new(pb, channels, heads, zero_out)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, key: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        if g.value(key).len() != c {
            return Err(Error::Shape(format!("key of {} values for {c} channels", g.value(key).len())));
        }
        let keyed = g.add_rows(x, key)?;
        Ok(self.attn.attend(g, x, keyed, x)?.out)
    }
}

/// `Φᵀ(r)`: channel self-attention.
#[derive(Clone, Debug)]
pub struct RefineTransform {
    pub attn: Mdta,
}

impl RefineTransform {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(RefineTransform { attn: Mdta::new(pb, channels, heads, zero_out)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, r: Var) -> Result<Var> {
        self.attn.forward(g, r)
    }
}

/// `x̂ − ρ · phi_t(phi(x̂) − ŷ)` with `ρ` a one-element variable.
pub fn stage_update<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    y: Var,
    rho: Var,
    phi: impl FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
    phi_t: impl FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    let px = phi(g, x)?;
    if g.shape(px) != g.shape(y) {
        return Err(Error::Shape(format!("stage update: Φx̂ {:?} vs ŷ {:?}", g.shape(px), g.shape(y))));
    }
    let r = g.sub(px, y)?;
    let step = phi_t(g, r)?;
    if g.shape(step) != g.shape(x) {
        return Err(Error::Shape(format!("stage update: step {:?} vs x̂ {:?}", g.shape(step), g.shape(x))));
    }
    let scaled = g.mul_scalar(step, rho)?;
    g.sub(x, scaled)
}

/// Learned gradient step for one stage.
#[derive(Clone, Debug)]
pub struct Dgdm {
    pub phi: DegradationTransform,
    pub phi_t: RefineTransform,
    /// `ρ = softplus(rho_raw)`.
    pub rho_raw: ParamId,
    /// Bypass both attentions (`Φ̃ = Φᵀ = identity`).
    pub identity_debug: bool,
}

impl Dgdm {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        rho_init: f64,
        zero_out: bool,
        identity_debug: bool,
    ) -> Result<Self> {
        if !(rho_init > 0.0) {
            return Err(Error::Config(format!("rho_init must be positive, got {rho_init}")));
        }
        Ok(Dgdm {
            phi: DegradationTransform::new(&mut pb.child("phi"), channels, heads, zero_out)?,
            phi_t: RefineTransform::new(&mut pb.child("phi_t"), channels, heads, zero_out)?,
            rho_raw: pb.full("rho_raw", &[1], rho_raw_for(rho_init))?,
            identity_debug,
        })
    }

    pub fn rho<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Var {
        let raw = g.param(self.rho_raw);
        g.softplus(raw)
    }

    /// The residual `Φᵀ(Φ̃(x̂, key) − ŷ)` and the updated `ẑ`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var, key: Var) -> Result<(Var, Var)> {
        let rho = self.rho(g);
        let mut residual = None;
        let z = if self.identity_debug {
            stage_update(g, x, y, rho, |_, v| Ok(v), |_, r| {
                residual = Some(r);
                Ok(r)
            })?
        } else {
            stage_update(
                g,
                x,
                y,
                rho,
                |g, v| self.phi.forward(g, v, key),
                |g, r| {
                    let s = self.phi_t.forward(g, r)?;
                    residual = Some(s);
                    Ok(s)
                },
            )?
        };
        Ok((residual.expect("phi_t ran"), z))
    }
}
