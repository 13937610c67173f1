//! The multi-level unfolding restorer.
//!
//! A degraded image is projected to `C₁` channels, then a U-shaped walk of
//! stages runs over feature levels (each level halves the extent and
//! doubles the channels). Every stage is a degradation-guided gradient step
//! followed by a proximal module. The result is projected back to RGB.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{check_heads, default_heads};
use crate::dgdm::{retrieve_key, stage_update, Dgdm, LevelKeys};
use crate::encoder::DegradationEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::params::init;
use crate::nn::{Conv1x1, Conv3, Graph, Linear, ParamBuilder, ParamId, ParamSet, Tensor, Var};
use crate::pmm::{Pmm, ProxConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    /// Strided 3×3 conv down, 1×1 conv + nearest upsample up.
    Conv,
    /// Pixel-unshuffle + 1×1 down, 1×1 + pixel-shuffle up.
    PixelShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformInit {
    /// `W` has orthonormal columns and `W⁻¹ = Wᵀ`.
    Orthonormal,
    /// First three channels copy the input, the rest are zero.
    IdentityPadded,
}

/// Which transforms the stages use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    Learned,
    /// `Φ̃` and `Φᵀ` bypassed.
    IdentityDebug,
    /// `Φ̃` bound to an explicit matrix and `Φᵀ` to its transpose.
    ExplicitOperator,
}

macro_rules! name_enum {
    ($t:ty { $($v:ident = $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s { $($s => Ok(Self::$v),)* _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t)))) }
            }
        }
    };
}

name_enum!(Transition { Conv = "conv", PixelShuffle = "pixel_shuffle" });
name_enum!(TransformInit { Orthonormal = "orthonormal", IdentityPadded = "identity_padded" });
name_enum!(StageMode { Learned = "learned", IdentityDebug = "identity_debug", ExplicitOperator = "explicit_operator" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub levels: usize,
    /// Level index of each stage.
    pub schedule: Vec<usize>,
    /// Transformer blocks per stage, indexed by level.
    pub blocks: Vec<usize>,
    /// Heads per level; empty means `C/16` (at least 1).
    pub heads: Vec<usize>,
    pub num_keys: usize,
    pub degradation_dim: usize,
    pub rho_init: f64,
    pub prox: ProxConfig,
    pub stage_mode: StageMode,
    pub zero_init_out: bool,
    pub transition: Transition,
    pub transform_init: TransformInit,
    pub residual_output: bool,
    /// One retrieval projection per level (true) or per stage.
    pub share_retrieval: bool,
    /// Replace the encoder's vector by a learned constant.
    pub learned_degradation: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            levels: 2,
            schedule: vec![0, 1, 1, 0],
            blocks: vec![2, 2],
            heads: Vec::new(),
            num_keys: 5,
            degradation_dim: 64,
            rho_init: 0.5,
            prox: ProxConfig::Learned,
            stage_mode: StageMode::Learned,
            zero_init_out: true,
            transition: Transition::Conv,
            transform_init: TransformInit::Orthonormal,
            residual_output: false,
            share_retrieval: true,
            learned_degradation: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Eight stages over four levels with 48 base channels.
    pub fn full_scale() -> Self {
        ModelConfig {
            channels: 48,
            levels: 4,
            schedule: vec![0, 1, 2, 3, 3, 2, 1, 0],
            blocks: vec![4, 6, 6, 8],
            ..ModelConfig::default()
        }
    }

    /// Single level, explicit operator, soft-threshold prox.
    pub fn ista_debug(stages: usize, threshold: f64) -> Self {
        ModelConfig {
            channels: 1,
            levels: 1,
            schedule: vec![0; stages],
            blocks: vec![0],
            prox: ProxConfig::SoftThreshold { threshold },
            stage_mode: StageMode::ExplicitOperator,
            ..ModelConfig::default()
        }
    }

    pub fn heads_at(&self, level: usize) -> usize {
        self.heads.get(level).copied().unwrap_or_else(|| default_heads(self.channels << level))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.levels == 0 {
            return bad("channels and levels must be positive".into());
        }
        if self.blocks.len() != self.levels {
            return bad(format!("{} block counts for {} levels", self.blocks.len(), self.levels));
        }
        if !self.heads.is_empty() && self.heads.len() != self.levels {
            return bad(format!("{} head counts for {} levels", self.heads.len(), self.levels));
        }
        if self.stage_mode == StageMode::Learned && self.prox == ProxConfig::Learned && self.blocks.contains(&0) {
            return bad("learned prox needs at least one block per level".into());
        }
        if self.stage_mode == StageMode::ExplicitOperator {
            if self.levels != 1 || !matches!(self.prox, ProxConfig::SoftThreshold { .. }) {
                return bad("explicit operator mode needs one level and a soft-threshold prox".into());
            }
            return Ok(());
        }
        if self.channels < 3 {
            return bad(format!("need at least 3 channels, got {}", self.channels));
        }
        for l in 0..self.levels {
            check_heads(self.channels << l, self.heads_at(l))?;
        }
        if self.num_keys == 0 || self.degradation_dim == 0 {
            return bad("num_keys and degradation_dim must be positive".into());
        }
        if !(self.rho_init > 0.0) {
            return bad(format!("rho_init must be positive, got {}", self.rho_init));
        }
        validate_schedule(&self.schedule, self.levels)
    }

    pub fn stages(&self) -> usize {
        self.schedule.len()
    }
}

/// Starts and ends at level 0, moves at most one level per stage, reaches
/// the deepest level and never turns back down after ascending.
pub fn validate_schedule(schedule: &[usize], levels: usize) -> Result<()> {
    let err = |m: &str| Err(Error::Config(format!("schedule {schedule:?}: {m}")));
    if schedule.is_empty() {
        return err("no stages");
    }
    if schedule[0] != 0 || *schedule.last().unwrap() != 0 {
        return err("must start and end at level 0");
    }
    if schedule.iter().any(|&l| l >= levels) {
        return err("level out of range");
    }
    if schedule.iter().max() != Some(&(levels - 1)) {
        return err("never reaches the deepest level");
    }
    let mut ascending = false;
    for w in schedule.windows(2) {
        let (a, b) = (w[0] as i64, w[1] as i64);
        if (a - b).abs() > 1 {
            return err("jumps more than one level");
        }
        if b < a {
            ascending = true;
        } else if b > a && ascending {
            return err("not a single U-shaped walk");
        }
    }
    Ok(())
}

/// Per-level feature shapes for one input size.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    /// `(H, W, C)` per level.
    pub levels: Vec<(usize, usize, usize)>,
    /// `(stage, level)` in execution order.
    pub schedule: Vec<(usize, usize)>,
    pub pmm_blocks: Vec<usize>,
}

impl LevelPlan {
    pub fn new(cfg: &ModelConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        let f = 1usize << (cfg.levels - 1);
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("{width}x{height} input not divisible by {f} for {} levels", cfg.levels)));
        }
        Ok(LevelPlan {
            levels: (0..cfg.levels).map(|l| (height >> l, width >> l, cfg.channels << l)).collect(),
            schedule: cfg.schedule.iter().copied().enumerate().collect(),
            pmm_blocks: cfg.schedule.iter().map(|&l| cfg.blocks[l]).collect(),
        })
    }

    pub fn shape(&self, level: usize) -> [usize; 3] {
        let (h, w, c) = self.levels[level];
        [c, h, w]
    }
}

#[derive(Clone, Debug)]
pub struct LevelTransform {
    /// `[C₁, 3]`.
    pub w: ParamId,
    /// `[3, C₁]`.
    pub w_inv: ParamId,
}

impl LevelTransform {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, mode: TransformInit) -> Result<Self> {
        let w: Vec<f64> = match mode {
            TransformInit::Orthonormal => init::orthonormal_columns(pb.rng(), channels, 3),
            TransformInit::IdentityPadded => {
                (0..channels * 3).map(|i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).collect()
            }
        };
        let w_inv: Vec<f64> = (0..3 * channels).map(|i| w[(i % channels) * 3 + i / channels]).collect();
        let to_t = |v: Vec<f64>, s: &[usize]| Tensor::new(s.to_vec(), v.into_iter().map(T::of).collect());
        Ok(LevelTransform {
            w: pb.add("w", to_t(w, &[channels, 3])?)?,
            w_inv: pb.add("w_inv", to_t(w_inv, &[3, channels])?)?,
        })
    }
}

/// `y ×₃ W`: per-pixel channel map of a `[3,H,W]` tensor.
pub fn project<T: Scalar>(g: &mut Graph<'_, T>, y: Var, t: &LevelTransform) -> Result<Var> {
    if g.shape(y).first() != Some(&3) {
        return Err(Error::Shape(format!("project expects 3 channels, got {:?}", g.shape(y))));
    }
    let w = g.param(t.w);
    g.conv1x1(y, w)
}

/// `x̂ ×₃ W⁻¹`, unclamped.
pub fn back_project<T: Scalar>(g: &mut Graph<'_, T>, x: Var, t: &LevelTransform) -> Result<Var> {
    let w = g.param(t.w_inv);
    let c = g.value(w).shape()[1];
    if g.shape(x).first() != Some(&c) {
        return Err(Error::Shape(format!("back_project expects {c} channels, got {:?}", g.shape(x))));
    }
    g.conv1x1(x, w)
}

#[derive(Clone, Debug)]
struct Stage {
    level: usize,
    dgdm: Dgdm,
    pmm: Pmm,
}

#[derive(Clone, Debug)]
enum Down {
    Conv(Conv3),
    Unshuffle(Conv1x1),
}

#[derive(Clone, Debug)]
enum Up {
    Nearest(Conv1x1),
    Shuffle(Conv1x1),
}

#[derive(Clone, Debug)]
struct Net {
    transform: LevelTransform,
    y_down: Vec<Conv3>,
    y_up: Vec<Conv1x1>,
    x_down: Vec<Down>,
    x_up: Vec<Up>,
    fuse: Vec<Conv1x1>,
    keys: Vec<LevelKeys>,
    retrieval: Vec<Linear>,
    stages: Vec<Stage>,
    null_degradation: Option<ParamId>,
}

/// Graph outputs of one restoration pass.
pub struct ForwardOutput {
    /// Unclamped RGB `[3,H,W]`.
    pub output: Var,
    /// First stage's `Φᵀ(Φ̃(x̂, d) − ŷ)` at level 0.
    pub first_residual: Var,
    /// `x̂` after each stage.
    pub stage_states: Vec<Var>,
}

pub struct Restorer<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    net: Net,
}

impl<T: Scalar> Restorer<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage_mode == StageMode::ExplicitOperator {
            return Err(Error::Config("explicit operator mode has no learnable restorer; use ista_mode_forward".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let c = |l: usize| cfg.channels << l;
        let transform = LevelTransform::new(&mut pb.child("transform"), cfg.channels, cfg.transform_init)?;
        let (mut y_down, mut y_up, mut x_down, mut x_up, mut fuse) = (vec![], vec![], vec![], vec![], vec![]);
        for l in 0..cfg.levels - 1 {
            y_down.push(Conv3::new(&mut pb.child(&format!("y_down{l}")), c(l), c(l + 1), 2, false)?);
            y_up.push(Conv1x1::new(&mut pb.child(&format!("y_up{l}")), c(l + 1), c(l))?);
            let mut xd = pb.child(&format!("x_down{l}"));
            x_down.push(match cfg.transition {
                Transition::Conv => Down::Conv(Conv3::new(&mut xd, c(l), c(l + 1), 2, false)?),
                Transition::PixelShuffle => Down::Unshuffle(Conv1x1::new(&mut xd, 4 * c(l), c(l + 1))?),
            });
            let mut xu = pb.child(&format!("x_up{l}"));
            x_up.push(match cfg.transition {
                Transition::Conv => Up::Nearest(Conv1x1::new(&mut xu, c(l + 1), c(l))?),
                Transition::PixelShuffle => Up::Shuffle(Conv1x1::new(&mut xu, c(l + 1), 4 * c(l))?),
            });
            // [I | 0]: the fused map starts as the skip connection.
            let cl = c(l);
            let w = Tensor::from_fn(&[cl, 2 * cl], |i| if i / (2 * cl) == i % (2 * cl) { T::one() } else { T::zero() });
            fuse.push(Conv1x1 { w: pb.child(&format!("fuse{l}")).add("w", w)? });
        }
        let mut keys = Vec::new();
        for l in 0..cfg.levels {
            keys.push(LevelKeys::new(&mut pb.child(&format!("keys{l}")), cfg.num_keys, c(l))?);
        }
        let n_retrieval = if cfg.share_retrieval { cfg.levels } else { cfg.stages() };
        let mut retrieval = Vec::new();
        for i in 0..n_retrieval {
            retrieval.push(Linear::new(&mut pb.child(&format!("retrieval{i}")), cfg.degradation_dim, cfg.num_keys, true)?);
        }
        let mut stages = Vec::new();
        for (s, &l) in cfg.schedule.iter().enumerate() {
            let mut sp = pb.child(&format!("stage{s}"));
            let heads = cfg.heads_at(l);
            let dgdm = Dgdm::new(
                &mut sp.child("dgdm"),
                c(l),
                heads,
                cfg.rho_init,
                cfg.zero_init_out,
                cfg.stage_mode == StageMode::IdentityDebug,
            )?;
            let pmm = Pmm::new(&mut sp.child("pmm"), cfg.prox, c(l), heads, cfg.blocks[l], cfg.zero_init_out)?;
            stages.push(Stage { level: l, dgdm, pmm });
        }
        let null_degradation = if cfg.learned_degradation {
            let t = init::normal(pb.rng(), &[cfg.degradation_dim, 1], (1.0 / cfg.degradation_dim as f64).sqrt());
            Some(pb.add("null_degradation", t)?)
        } else {
            None
        };
        let net = Net { transform, y_down, y_up, x_down, x_up, fuse, keys, retrieval, stages, null_degradation };
        Ok(Restorer { cfg, params, net })
    }

    /// Rebuilds from `cfg` and copies every parameter from `params`.
    pub fn from_params(cfg: ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut r = Self::new(cfg)?;
        let copied = r.params.load_from(params)?;
        if copied != r.params.len() || params.len() != r.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, {copied} of the {} expected",
                params.len(),
                r.params.len()
            )));
        }
        Ok(r)
    }

    pub fn transform(&self) -> &LevelTransform {
        &self.net.transform
    }

    pub fn uses_encoder(&self) -> bool {
        self.net.null_degradation.is_none()
    }

    fn degradation_var(&self, g: &mut Graph<'_, T>, d: Option<&[f64]>) -> Result<Var> {
        match (self.net.null_degradation, d) {
            (Some(id), _) => Ok(g.param(id)),
            (None, Some(d)) if d.len() == self.cfg.degradation_dim => {
                Ok(g.constant(Tensor::new(vec![d.len(), 1], d.iter().map(|v| T::of(*v)).collect())?))
            }
            (None, Some(d)) => Err(Error::Shape(format!(
                "degradation vector has {} values, model expects {}",
                d.len(),
                self.cfg.degradation_dim
            ))),
            (None, None) => Err(Error::Model("model needs a degradation vector".into())),
        }
    }

    fn down_x(&self, g: &mut Graph<'_, T>, x: Var, l: usize) -> Result<Var> {
        match &self.net.x_down[l] {
            Down::Conv(c) => c.forward(g, x),
            Down::Unshuffle(c) => {
                let u = g.pixel_unshuffle(x)?;
                c.forward(g, u)
            }
        }
    }

    fn up_x(&self, g: &mut Graph<'_, T>, x: Var, l: usize) -> Result<Var> {
        match &self.net.x_up[l] {
            Up::Nearest(c) => {
                let h = c.forward(g, x)?;
                g.upsample2(h)
            }
            Up::Shuffle(c) => {
                let h = c.forward(g, x)?;
                g.pixel_shuffle(h)
            }
        }
    }

    /// Encoder-side inputs `ŷ_enc[l]` and decoder-side `ŷ_dec[l]`.
    pub fn level_inputs(&self, g: &mut Graph<'_, T>, y1: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut enc = vec![y1];
        for conv in &self.net.y_down {
            let prev = *enc.last().unwrap();
            enc.push(conv.forward(g, prev)?);
        }
        let mut dec = enc.clone();
        for l in (0..self.cfg.levels - 1).rev() {
            let up = self.net.y_up[l].forward(g, dec[l + 1])?;
            let up = g.upsample2(up)?;
            dec[l] = g.add(enc[l], up)?;
        }
        Ok((enc, dec))
    }

    pub fn forward_graph(&self, g: &mut Graph<'_, T>, y: Var, d: Option<&[f64]>) -> Result<ForwardOutput> {
        let shape = g.shape(y).to_vec();
        let [3, h, w] = shape[..] else {
            return Err(Error::Shape(format!("restorer expects [3,H,W], got {shape:?}")));
        };
        let plan = LevelPlan::new(&self.cfg, h, w)?;
        let dv = self.degradation_var(g, d)?;
        let y1 = project(g, y, &self.net.transform)?;
        let (y_enc, y_dec) = self.level_inputs(g, y1)?;
        let mut x = y1;
        let mut cur = 0;
        let mut deepest = 0;
        let mut skips: Vec<Option<Var>> = vec![None; self.cfg.levels];
        let mut first_residual = None;
        let mut states = Vec::with_capacity(self.net.stages.len());
        for (s, stage) in self.net.stages.iter().enumerate() {
            let target = stage.level;
            while cur < target {
                skips[cur] = Some(x);
                x = self.down_x(g, x, cur)?;
                cur += 1;
            }
            while cur > target {
                let up = self.up_x(g, x, cur - 1)?;
                let skip = skips[cur - 1].expect("descended through this level");
                let cat = g.concat(&[skip, up])?;
                x = self.net.fuse[cur - 1].forward(g, cat)?;
                cur -= 1;
            }
            deepest = deepest.max(cur);
            if g.shape(x) != plan.shape(cur) {
                return Err(Error::Shape(format!("stage {s}: state {:?}, plan {:?}", g.shape(x), plan.shape(cur))));
            }
            let yl = if deepest > cur { y_dec[cur] } else { y_enc[cur] };
            let proj = &self.net.retrieval[if self.cfg.share_retrieval { cur } else { s }];
            let key = retrieve_key(g, dv, &self.net.keys[cur], proj)?;
            let (res, z) = stage.dgdm.forward(g, x, yl, key)?;
            first_residual.get_or_insert(res);
            x = stage.pmm.forward(g, z)?;
            states.push(x);
        }
        let mut out = back_project(g, x, &self.net.transform)?;
        if self.cfg.residual_output {
            out = g.add(y, out)?;
        }
        Ok(ForwardOutput { output: out, first_residual: first_residual.expect("at least one stage"), stage_states: states })
    }

    /// Clamped restoration of `y` given its degradation vector.
    pub fn restore(&self, y: &Image, d: Option<&[f64]>) -> Result<Image> {
        let mut g = Graph::new(&self.params);
        let yv = g.constant(y.to_tensor());
        let out = self.forward_graph(&mut g, yv, d)?;
        Ok(Image::from_tensor(g.value(out.output))?.clamp01())
    }

    /// First-stage residual mapped to RGB by `W⁻¹`, not normalized.
    pub fn degradation_residual(&self, y: &Image, d: Option<&[f64]>) -> Result<Image> {
        let mut g = Graph::new(&self.params);
        let yv = g.constant(y.to_tensor());
        let out = self.forward_graph(&mut g, yv, d)?;
        let rgb = back_project(&mut g, out.first_residual, &self.net.transform)?;
        Image::from_tensor(g.value(rgb))
    }
}

/// `restore` with the degradation vector taken from `encoder`.
pub fn restore<T: Scalar>(y: &Image, encoder: Option<&dyn DegradationEncoder>, model: &Restorer<T>) -> Result<Image> {
    let d = match encoder {
        Some(e) if model.uses_encoder() => Some(e.encode_image(y)?),
        _ => None,
    };
    model.restore(y, d.as_deref())
}

/// Runs `stages` unfolded iterations with `Φ̃ = Φ`, `Φᵀ = Φᵀ` and a
/// soft-threshold prox at `ρλ`, returning every iterate. `phi` is row-major
/// `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn ista_mode_forward(
    cfg: &ModelConfig,
    phi: &[f64],
    m: usize,
    n: usize,
    y: &[f64],
    x0: &[f64],
    rho: f64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let ProxConfig::SoftThreshold { threshold } = cfg.prox else {
        return Err(Error::Config("ista mode needs a soft-threshold prox".into()));
    };
    if cfg.stage_mode != StageMode::ExplicitOperator {
        return Err(Error::Config("ista mode needs an explicit-operator configuration".into()));
    }
    if phi.len() != m * n || y.len() != m || x0.len() != n {
        return Err(Error::Shape(format!("ista: Φ {} values for {m}x{n}, y {}, x0 {}", phi.len(), y.len(), x0.len())));
    }
    let params = ParamSet::<f64>::new();
    let mut g = Graph::new(&params);
    let pv = g.constant(Tensor::new(vec![m, n], phi.to_vec())?);
    let yv = g.constant(Tensor::new(vec![m, 1], y.to_vec())?);
    let rv = g.constant(Tensor::scalar(rho));
    let pmm = Pmm { cfg: ProxConfig::SoftThreshold { threshold }, blocks: Vec::new() };
    let mut x = g.constant(Tensor::new(vec![n, 1], x0.to_vec())?);
    let mut out = Vec::with_capacity(cfg.stages());
    for _ in 0..cfg.stages() {
        let z = stage_update(&mut g, x, yv, rv, |g, v| g.matmul(pv, v), |g, r| g.matmul_t(pv, true, r, false))?;
        x = pmm.forward(&mut g, z)?;
        out.push(g.value(x).data().to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn tiny() -> ModelConfig {
        ModelConfig { channels: 4, blocks: vec![1, 1], degradation_dim: 6, num_keys: 2, ..ModelConfig::default() }
    }

    fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y, c| 0.1 + 0.8 * (((x * 5 + y * 3 + c * 7) % 17) as f64 / 16.0))
    }

    #[test]
    fn schedules() {
        assert!(validate_schedule(&[0, 1, 1, 0], 2).is_ok());
        assert!(validate_schedule(&[0, 1, 2, 3, 3, 2, 1, 0], 4).is_ok());
        assert!(validate_schedule(&[0, 0, 0], 1).is_ok());
        assert!(validate_schedule(&[0, 1, 0, 1, 0], 2).is_err());
        assert!(validate_schedule(&[0, 2, 0], 3).is_err());
        assert!(validate_schedule(&[0, 1], 2).is_err());
        assert!(validate_schedule(&[0, 0], 2).is_err());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn plan_shapes() {
        let p = LevelPlan::new(&ModelConfig::default(), 16, 16).unwrap();
        assert_eq!(p.levels, vec![(16, 16, 16), (8, 8, 32)]);
        assert_eq!(p.pmm_blocks, vec![2, 2, 2, 2]);
        assert!(LevelPlan::new(&ModelConfig::default(), 15, 16).is_err());
    }

    #[test]
    fn orthonormal_round_trip_and_identity_padding() {
        let r = Restorer::<f64>::new(tiny()).unwrap();
        let y = texture(6, 4);
        let mut g = Graph::new(&r.params);
        let yv = g.constant(y.to_tensor());
        let p = project(&mut g, yv, r.transform()).unwrap();
        let b = back_project(&mut g, p, r.transform()).unwrap();
        assert!(g.value(b).max_abs_diff(g.value(yv)) < 1e-12);

        let cfg = ModelConfig { transform_init: TransformInit::IdentityPadded, ..tiny() };
        let r = Restorer::<f64>::new(cfg).unwrap();
        let mut g = Graph::new(&r.params);
        let yv = g.constant(y.to_tensor());
        let p = project(&mut g, yv, r.transform()).unwrap();
        let pv = g.value(p);
        assert_eq!(&pv.data()[..3 * 24], &g.value(yv).data()[..]);
        assert!(pv.data()[3 * 24..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn level_inputs_shapes_and_linearity() {
        let r = Restorer::<f64>::new(tiny()).unwrap();
        let mut g = Graph::new(&r.params);
        let y1 = g.constant(Tensor::zeros(&[4, 8, 8]));
        let (enc, dec) = r.level_inputs(&mut g, y1).unwrap();
        assert_eq!(g.shape(enc[1]), &[8, 4, 4]);
        assert_eq!(g.shape(dec[0]), &[4, 8, 8]);
        assert!(enc.iter().chain(&dec).all(|v| g.value(*v).data().iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn identity_at_init() {
        for transition in [Transition::Conv, Transition::PixelShuffle] {
            let r = Restorer::<f64>::new(ModelConfig { transition, ..tiny() }).unwrap();
            let y = texture(8, 8);
            let out = r.restore(&y, Some(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
            assert!(psnr(&out, &y, 1.0).unwrap() > 60.0);
        }
    }

    #[test]
    fn restore_errors() {
        let r = Restorer::<f64>::new(tiny()).unwrap();
        assert!(r.restore(&texture(7, 8), Some(&[0.0; 6])).is_err());
        assert!(r.restore(&texture(8, 8), Some(&[0.0; 5])).is_err());
        assert!(r.restore(&texture(8, 8), None).is_err());
        let nd = Restorer::<f64>::new(ModelConfig { learned_degradation: true, ..tiny() }).unwrap();
        assert_eq!(nd.restore(&texture(8, 8), None).unwrap().width(), 8);
    }

    #[test]
    fn ista_mode_basics() {
        let cfg = ModelConfig::ista_debug(1, 0.0);
        let x0 = [0.5, -1.0];
        let it = ista_mode_forward(&cfg, &[1.0, 0.0, 0.0, 1.0], 2, 2, &[3.0, 4.0], &x0, 0.0).unwrap();
        assert_eq!(it[0], x0.to_vec());
        let it = ista_mode_forward(&cfg, &[1.0, 0.0, 0.0, 1.0], 2, 2, &[3.0, 4.0], &x0, 1.0).unwrap();
        assert_eq!(it[0], vec![3.0, 4.0]);
        assert!(ista_mode_forward(&tiny(), &[1.0], 1, 1, &[1.0], &[1.0], 1.0).is_err());
        assert!(Restorer::<f64>::new(cfg).is_err());
    }
}
