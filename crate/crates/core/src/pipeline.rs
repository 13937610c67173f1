//! Training, evaluation and checkpoint IO for the desk-scale pipeline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{model_entries, model_from_entries, AblationPreset, EncoderConfig, TrainConfig};
use crate::dataset::DatasetManifest;
use crate::degrade::mix_seed;
use crate::encoder::{DegradationEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{min_max_normalize, psnr, ssim, ImageMetric, MetricReport};
use crate::nn::{checkpoint, AdamW, CheckpointHeader, GradAccumulator, Graph};
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;
use crate::unfolder::{ModelConfig, Restorer};

/// Same random crop and flips applied to both images of a pair.
pub fn augment<R: Rng>(clean: &Image, degraded: &Image, crop: usize, flip_h: bool, flip_v: bool, rng: &mut R) -> Result<(Image, Image)> {
    if !clean.same_shape(degraded) {
        return Err(Error::Shape("clean and degraded images differ in size".into()));
    }
    if crop > clean.width() || crop > clean.height() {
        return Err(Error::Param(format!("crop {crop} larger than {}x{} image", clean.width(), clean.height())));
    }
    let x0 = rng.random_range(0..=clean.width() - crop);
    let y0 = rng.random_range(0..=clean.height() - crop);
    let mut c = clean.crop(x0, y0, crop, crop)?;
    let mut d = degraded.crop(x0, y0, crop, crop)?;
    if flip_h && rng.random::<bool>() {
        c = c.flip_horizontal();
        d = d.flip_horizontal();
    }
    if flip_v && rng.random::<bool>() {
        c = c.flip_vertical();
        d = d.flip_vertical();
    }
    Ok((c, d))
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Restorer<T>,
    pub losses: Vec<f64>,
    /// Mean validation PSNR after each epoch; NaN if there is no validation split.
    pub val_psnr: Vec<f64>,
}

fn encode_all(enc: Option<&dyn DegradationEncoder>, images: &[Image]) -> Result<Vec<Option<Vec<f64>>>> {
    images.iter().map(|y| enc.map(|e| e.encode_image(y)).transpose()).collect()
}

/// Trains a restorer built from `model_cfg` rewired by the training preset.
/// Degradation vectors are computed once per record from the full degraded
/// image. `log` receives one line per epoch.
pub fn train_restorer<T: Scalar>(
    manifest: &DatasetManifest,
    encoder: Option<&dyn DegradationEncoder>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome<T>> {
    let mcfg = cfg.preset.apply(model_cfg);
    cfg.validate(&mcfg)?;
    let mut model = Restorer::<T>::new(mcfg)?;
    let encoder = if model.uses_encoder() {
        Some(encoder.ok_or_else(|| Error::Config(format!("preset {} needs an encoder", cfg.preset)))?)
    } else {
        None
    };
    let (train_idx, val_idx) = manifest.split();
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training records".into()));
    }
    let load = |idx: &[usize]| -> Result<Vec<(Image, Image)>> { idx.iter().map(|&i| manifest.load_pair(i)).collect() };
    let train_pairs = load(&train_idx)?;
    let val_take = if cfg.val_limit == 0 { val_idx.len() } else { cfg.val_limit.min(val_idx.len()) };
    let val_pairs = load(&val_idx[..val_take])?;
    let degraded: Vec<Image> = train_pairs.iter().map(|p| p.1.clone()).collect();
    let train_d = encode_all(encoder, &degraded)?;
    let degraded: Vec<Image> = val_pairs.iter().map(|p| p.1.clone()).collect();
    let val_d = encode_all(encoder, &degraded)?;

    let per_epoch = if cfg.samples_per_epoch == 0 { train_pairs.len() } else { cfg.samples_per_epoch };
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch)?;
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut acc = GradAccumulator::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EA1));
    let mut pool: Vec<usize> = Vec::new();
    let mut out = TrainOutcome { model: Restorer::new(model.cfg.clone())?, losses: Vec::new(), val_psnr: Vec::new() };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = Vec::with_capacity(per_epoch);
        while order.len() < per_epoch {
            if pool.is_empty() {
                pool = (0..train_pairs.len()).collect();
                pool.shuffle(&mut rng);
            }
            order.push(pool.pop().expect("refilled"));
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            acc.clear();
            let w = T::of(1.0 / batch.len() as f64);
            for &j in batch {
                let (c, y) = augment(&train_pairs[j].0, &train_pairs[j].1, cfg.crop_size, cfg.flip_horizontal, cfg.flip_vertical, &mut rng)?;
                let mut g = Graph::new(&model.params);
                let yv = g.constant(y.to_tensor());
                let f = model.forward_graph(&mut g, yv, train_d[j].as_deref())?;
                let target = g.constant(c.to_tensor());
                let loss = g.l1_loss(f.output, target)?;
                let lv = g.value(loss).item().to_f64_lossy();
                if !lv.is_finite() {
                    return Err(Error::Model(format!("restorer loss diverged at epoch {}", epoch + 1)));
                }
                total += lv;
                let grads = g.backward(loss)?;
                acc.add(&model.params, &grads, w);
            }
            opt.step(&mut model.params, &acc, T::of(sched.lr_at(step)));
            step += 1;
        }
        let loss = total / per_epoch as f64;
        let mut vp = 0.0;
        for ((clean, y), d) in val_pairs.iter().zip(&val_d) {
            vp += psnr(&model.restore(y, d.as_deref())?, clean, 1.0)?;
        }
        let vp = if val_pairs.is_empty() { f64::NAN } else { vp / val_pairs.len() as f64 };
        out.losses.push(loss);
        out.val_psnr.push(vp);
        log(&format!("epoch {} loss {:.6} val_psnr {:.3}", epoch + 1, loss, vp));
    }
    if !model.params.all_finite() {
        return Err(Error::Model("restorer parameters are not finite".into()));
    }
    out.model = model;
    Ok(out)
}

fn record_id(manifest: &DatasetManifest, i: usize) -> String {
    let p = &manifest.records[i].degraded_path;
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string())
}

/// Scores `f(degraded)` against the clean image for every record.
pub fn evaluate_with(manifest: &DatasetManifest, mut f: impl FnMut(&Image) -> Result<Image>) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for i in 0..manifest.records.len() {
        let (clean, y) = manifest.load_pair(i)?;
        let x = f(&y)?;
        report.push(ImageMetric {
            id: record_id(manifest, i),
            kind: manifest.records[i].kind(),
            psnr_db: psnr(&x, &clean, 1.0)?,
            ssim: ssim(&x, &clean)?,
        });
    }
    Ok(report)
}

pub fn evaluate<T: Scalar>(model: &Restorer<T>, encoder: Option<&dyn DegradationEncoder>, manifest: &DatasetManifest) -> Result<MetricReport> {
    evaluate_with(manifest, |y| crate::unfolder::restore(y, encoder, model))
}

/// Metrics of the unrestored inputs.
pub fn degraded_baseline(manifest: &DatasetManifest) -> Result<MetricReport> {
    evaluate_with(manifest, |y| Ok(y.clone()))
}

/// First-stage residual in RGB, min-max normalized over the whole image.
pub fn degradation_map<T: Scalar>(model: &Restorer<T>, encoder: Option<&dyn DegradationEncoder>, y: &Image) -> Result<Image> {
    let d = match encoder {
        Some(e) if model.uses_encoder() => Some(e.encode_image(y)?),
        _ => None,
    };
    Ok(min_max_normalize(&model.degradation_residual(y, d.as_deref())?))
}

/// Encoder for a preset: the tuned one, or a seeded random initialization
/// for `frozen_encoder`. `None` when the preset ignores the encoder.
pub fn encoder_for_preset<T: Scalar>(
    preset: AblationPreset,
    enc_cfg: &EncoderConfig,
    tuned: Option<ToyEncoder<T>>,
) -> Result<Option<ToyEncoder<T>>> {
    match preset {
        AblationPreset::NoEncoder => Ok(None),
        AblationPreset::FrozenEncoder => Ok(Some(ToyEncoder::new(enc_cfg.arch.clone(), enc_cfg.train.seed)?)),
        AblationPreset::TunedEncoder | AblationPreset::SerialBaseline => tuned
            .map(Some)
            .ok_or_else(|| Error::Config(format!("preset {preset} needs a fine-tuned encoder checkpoint"))),
    }
}

fn header_kind(h: &CheckpointHeader, want: &str) -> Result<()> {
    match h.get("kind") {
        Some(k) if k == want => Ok(()),
        other => Err(Error::Checkpoint(format!("expected a {want} checkpoint, found kind {other:?}"))),
    }
}

fn prefixed<'a>(h: &'a CheckpointHeader, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
    h.entries.iter().filter_map(move |(k, v)| k.strip_prefix(prefix).map(|k| (k, v.as_str())))
}

pub fn save_encoder<T: Scalar>(path: &Path, enc: &ToyEncoder<T>, cfg: &EncoderConfig, config_hash: &str) -> Result<()> {
    let mut h = CheckpointHeader::default();
    h.set("kind", "encoder");
    h.set("config_hash", config_hash);
    for (k, v) in cfg.entries() {
        h.set(&format!("encoder.{k}"), v);
    }
    checkpoint::save(path, &h, &enc.params)
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<(ToyEncoder<T>, EncoderConfig, CheckpointHeader)> {
    let (h, params) = checkpoint::load::<T>(path)?;
    header_kind(&h, "encoder")?;
    let cfg = EncoderConfig::from_entries(prefixed(&h, "encoder.")).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let enc = ToyEncoder::from_params(cfg.arch.clone(), &params)?;
    Ok((enc, cfg, h))
}

pub fn save_restorer<T: Scalar>(path: &Path, model: &Restorer<T>, preset: AblationPreset, config_hash: &str) -> Result<()> {
    let mut h = CheckpointHeader::default();
    h.set("kind", "restorer");
    h.set("config_hash", config_hash);
    h.set("preset", preset);
    for (k, v) in model_entries(&model.cfg) {
        h.set(&format!("model.{k}"), v);
    }
    checkpoint::save(path, &h, &model.params)
}

pub fn load_restorer<T: Scalar>(path: &Path) -> Result<(Restorer<T>, AblationPreset, CheckpointHeader)> {
    let (h, params) = checkpoint::load::<T>(path)?;
    header_kind(&h, "restorer")?;
    let cfg = model_from_entries(prefixed(&h, "model.")).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let preset = h
        .get("preset")
        .ok_or_else(|| Error::Checkpoint("restorer checkpoint has no preset".into()))?
        .parse()
        .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    Ok((Restorer::from_params(cfg, &params)?, preset, h))
}
