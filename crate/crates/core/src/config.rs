//! Sectioned `key = value` configuration.
//!
//! Sections are `[data]`, `[encoder]`, `[model]` and `[train]`. Lists are
//! comma-separated, `#` starts a comment, and unknown sections or keys are
//! errors. [`Config::to_text`] prints every key, and parsing that text gives
//! back the same configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{CleanSource, DegradationDistribution, Range};
use crate::degrade::DegradationKind;
use crate::encoder::{EncoderArch, FinetuneConfig, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::unfolder::ModelConfig;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationPreset {
    /// The degradation vector is replaced by a learned constant.
    NoEncoder,
    /// An encoder at its random initialization, never fine-tuned.
    FrozenEncoder,
    TunedEncoder,
    /// All stages at level 0.
    SerialBaseline,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] =
        [AblationPreset::NoEncoder, AblationPreset::FrozenEncoder, AblationPreset::TunedEncoder, AblationPreset::SerialBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationPreset::NoEncoder => "no_encoder",
            AblationPreset::FrozenEncoder => "frozen_encoder",
            AblationPreset::TunedEncoder => "tuned_encoder",
            AblationPreset::SerialBaseline => "serial_baseline",
        }
    }

    /// Whether the preset expects a fine-tuned encoder checkpoint.
    pub fn needs_tuned_encoder(self) -> bool {
        matches!(self, AblationPreset::TunedEncoder | AblationPreset::SerialBaseline)
    }

    /// Rewires `cfg` for this preset.
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            AblationPreset::NoEncoder => c.learned_degradation = true,
            AblationPreset::FrozenEncoder | AblationPreset::TunedEncoder => c.learned_degradation = false,
            AblationPreset::SerialBaseline => {
                c.learned_degradation = false;
                c.schedule = vec![0; cfg.stages()];
                c.blocks = vec![cfg.blocks[0]];
                c.heads = cfg.heads.first().map(|h| vec![*h]).unwrap_or_default();
                c.levels = 1;
            }
        }
        c
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| cfg_err(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Side of procedural images.
    pub size: usize,
    /// Directory of clean PNGs; procedural textures when `None`.
    pub source_dir: Option<PathBuf>,
    pub kinds: Vec<DegradationKind>,
    /// One distribution per kind in [`DegradationKind::ALL`] order.
    pub dists: Vec<DegradationDistribution>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 2000,
            seed: 0,
            size: 48,
            source_dir: None,
            kinds: DegradationKind::ALL.to_vec(),
            dists: DegradationKind::ALL.iter().map(|k| DegradationDistribution::default_for(*k)).collect(),
        }
    }
}

impl DataConfig {
    pub fn source(&self) -> CleanSource {
        match &self.source_dir {
            Some(d) => CleanSource::Directory(d.clone()),
            None => CleanSource::Procedural { size: self.size },
        }
    }

    pub fn selected(&self) -> Vec<DegradationDistribution> {
        self.kinds.iter().map(|k| self.dists[*k as usize].clone()).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "count" => self.count = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "size" => self.size = parse_num(key, v)?,
            "source" => {
                self.source_dir = match v.trim() {
                    "procedural" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "kinds" => self.kinds = parse_list(key, v)?,
            _ => {
                let (kind, param) = key.split_once('.').ok_or_else(|| cfg_err(format!("unknown [data] key {key:?}")))?;
                let kind: DegradationKind = kind.parse().map_err(|_| cfg_err(format!("unknown [data] key {key:?}")))?;
                self.dists[kind as usize].set(param, Range::parse(v)?)?;
            }
        }
        Ok(())
    }

    fn write(&self, s: &mut String) {
        let _ = writeln!(s, "[data]\ncount = {}\nseed = {}\nsize = {}", self.count, self.seed, self.size);
        let src = self.source_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "procedural".into());
        let _ = writeln!(s, "source = {src}\nkinds = {}", join(&self.kinds));
        for d in &self.dists {
            for (name, r) in d.kind.param_names().iter().zip(&d.ranges) {
                let _ = writeln!(s, "{}.{name} = {r}", d.kind);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub gamma: f64,
    pub train: FinetuneConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { arch: EncoderArch::default(), gamma: DEFAULT_GAMMA, train: FinetuneConfig::default() }
    }
}

impl EncoderConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dim" => self.arch.dim = parse_num(key, v)?,
            "widths" => self.arch.widths = parse_list(key, v)?,
            "labels" => self.arch.labels = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "gamma" => self.gamma = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "backbone_warm_epochs" => t.backbone_warm_epochs = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            _ => return Err(cfg_err(format!("unknown [encoder] key {key:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        vec![
            ("dim", self.arch.dim.to_string()),
            ("widths", join(&self.arch.widths)),
            ("labels", self.arch.labels.join(", ")),
            ("gamma", self.gamma.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("backbone_warm_epochs", t.backbone_warm_epochs.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
        ]
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = EncoderConfig::default();
        for (k, v) in entries {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.labels.iter().any(|l| l.contains(',') || l.contains('\n')) {
            return Err(cfg_err("labels may not contain commas or newlines"));
        }
        if !(self.gamma > 0.0) {
            return Err(cfg_err(format!("gamma must be positive, got {}", self.gamma)));
        }
        let t = &self.train;
        if t.warmup_epochs > t.epochs {
            return Err(cfg_err("encoder warmup_epochs exceeds epochs"));
        }
        if !(t.lr > 0.0) || t.batch_size < 2 {
            return Err(cfg_err("encoder needs lr > 0 and batch_size ≥ 2"));
        }
        Ok(())
    }
}

pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("channels", m.channels.to_string()),
        ("levels", m.levels.to_string()),
        ("schedule", join(&m.schedule)),
        ("blocks", join(&m.blocks)),
        ("heads", join(&m.heads)),
        ("num_keys", m.num_keys.to_string()),
        ("degradation_dim", m.degradation_dim.to_string()),
        ("rho_init", m.rho_init.to_string()),
        ("prox", m.prox.to_string()),
        ("stage_mode", m.stage_mode.to_string()),
        ("zero_init_out", m.zero_init_out.to_string()),
        ("transition", m.transition.to_string()),
        ("transform_init", m.transform_init.to_string()),
        ("residual_output", m.residual_output.to_string()),
        ("share_retrieval", m.share_retrieval.to_string()),
        ("learned_degradation", m.learned_degradation.to_string()),
        ("seed", m.seed.to_string()),
    ]
}

pub fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "channels" => m.channels = parse_num(key, v)?,
        "levels" => m.levels = parse_num(key, v)?,
        "schedule" => m.schedule = parse_list(key, v)?,
        "blocks" => m.blocks = parse_list(key, v)?,
        "heads" => m.heads = parse_list(key, v)?,
        "num_keys" => m.num_keys = parse_num(key, v)?,
        "degradation_dim" => m.degradation_dim = parse_num(key, v)?,
        "rho_init" => m.rho_init = parse_num(key, v)?,
        "prox" => m.prox = v.trim().parse()?,
        "stage_mode" => m.stage_mode = v.trim().parse()?,
        "zero_init_out" => m.zero_init_out = parse_bool(key, v)?,
        "transition" => m.transition = v.trim().parse()?,
        "transform_init" => m.transform_init = v.trim().parse()?,
        "residual_output" => m.residual_output = parse_bool(key, v)?,
        "share_retrieval" => m.share_retrieval = parse_bool(key, v)?,
        "learned_degradation" => m.learned_degradation = parse_bool(key, v)?,
        "seed" => m.seed = parse_num(key, v)?,
        _ => return Err(cfg_err(format!("unknown [model] key {key:?}"))),
    }
    Ok(())
}

pub fn model_from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (k, v) in entries {
        set_model(&mut m, k, v)?;
    }
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Training samples drawn per epoch; 0 uses the whole training split.
    pub samples_per_epoch: usize,
    /// Validation images scored per epoch; 0 scores all of them.
    pub val_limit: usize,
    pub preset: AblationPreset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            epochs: 40,
            warmup_epochs: 3,
            batch_size: 8,
            crop_size: 32,
            flip_horizontal: true,
            flip_vertical: true,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            samples_per_epoch: 0,
            val_limit: 0,
            preset: AblationPreset::TunedEncoder,
        }
    }
}

impl TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "crop_size" => self.crop_size = parse_num(key, v)?,
            "flip_horizontal" => self.flip_horizontal = parse_bool(key, v)?,
            "flip_vertical" => self.flip_vertical = parse_bool(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "samples_per_epoch" => self.samples_per_epoch = parse_num(key, v)?,
            "val_limit" => self.val_limit = parse_num(key, v)?,
            "preset" => self.preset = v.trim().parse()?,
            _ => return Err(cfg_err(format!("unknown [train] key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("flip_horizontal", self.flip_horizontal.to_string()),
            ("flip_vertical", self.flip_vertical.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("seed", self.seed.to_string()),
            ("samples_per_epoch", self.samples_per_epoch.to_string()),
            ("val_limit", self.val_limit.to_string()),
            ("preset", self.preset.to_string()),
        ]
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(cfg_err(format!("lr must be positive, got {}", self.lr)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(cfg_err(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        let f = 1usize << (model.levels - 1);
        if self.crop_size == 0 || self.crop_size % f != 0 {
            return Err(cfg_err(format!("crop_size {} not divisible by {f}", self.crop_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| cfg_err(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: ")));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name.trim() {
                    s @ ("data" | "encoder" | "model" | "train") => s.to_string(),
                    s => return Err(cfg_err(format!("line {}: unknown section [{s}]", n + 1))),
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match section.as_deref() {
                Some("data") => c.data.set(k, v),
                Some("encoder") => c.encoder.set(k, v),
                Some("model") => set_model(&mut c.model, k, v),
                Some("train") => c.train.set(k, v),
                _ => Err(cfg_err(format!("key {k:?} outside a section"))),
            }
            .map_err(at)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.count == 0 {
            return Err(cfg_err("data count must be positive"));
        }
        if self.data.kinds.is_empty() {
            return Err(cfg_err("data kinds must not be empty"));
        }
        self.encoder.validate()?;
        self.model.validate()?;
        if self.model.degradation_dim != self.encoder.arch.dim {
            return Err(cfg_err(format!(
                "model degradation_dim {} differs from encoder dim {}",
                self.model.degradation_dim, self.encoder.arch.dim
            )));
        }
        self.train.validate(&self.train.preset.apply(&self.model))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.data.write(&mut s);
        let mut section = |name: &str, entries: Vec<(&'static str, String)>| {
            let _ = writeln!(s, "\n[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        section("encoder", self.encoder.entries());
        section("model", model_entries(&self.model));
        section("train", self.train.entries());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.data.kinds = vec![DegradationKind::Noise, DegradationKind::Rain];
        c.data.dists[0].ranges[0] = Range::fixed(25.0);
        c.model.heads = vec![1, 2];
        c.train.preset = AblationPreset::NoEncoder;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(Config::default().hash(), c.hash());
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = Config::parse("# desk\n[data]\ncount = 12\nnoise.sigma = 25\n[train]\nepochs = 2 # short\nwarmup_epochs = 1\n").unwrap();
        assert_eq!(c.data.count, 12);
        assert_eq!(c.data.dists[0].ranges[0], Range::fixed(25.0));
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn errors() {
        for bad in [
            "[data]\nbogus = 1\n",
            "[nope]\n",
            "count = 3\n",
            "[data]\ncount\n",
            "[train]\nlr = -1\n",
            "[train]\nwarmup_epochs = 50\nepochs = 10\n",
            "[train]\ncrop_size = 31\n",
            "[model]\nschedule = 0, 1, 0, 1, 0\n",
            "[model]\nzero_init_out = yes\n",
            "[data]\nnoise.gamma = 2\n",
            "[data]\nkinds = noise, snow\n",
            "[encoder]\ndim = 32\n",
        ] {
            let e = Config::parse(bad).unwrap_err();
            assert!(e.is_config(), "{bad:?}: {e}");
        }
    }

    #[test]
    fn presets_rewire() {
        let m = ModelConfig::default();
        assert!(AblationPreset::NoEncoder.apply(&m).learned_degradation);
        let s = AblationPreset::SerialBaseline.apply(&m);
        assert_eq!((s.levels, s.schedule.clone(), s.blocks.clone()), (1, vec![0; 4], vec![2]));
        assert!(s.validate().is_ok());
        assert_eq!("frozen_encoder".parse::<AblationPreset>().unwrap(), AblationPreset::FrozenEncoder);
        assert!("none".parse::<AblationPreset>().is_err());
    }
}
