//! End-to-end acceptance checks, one line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4` runs a subset. Failures are reported and the
//! process still exits 0 unless `ACCEPTANCE_STRICT=1` is set.

use std::path::Path;
use std::time::{Duration, Instant};

use dgunfold::config::{AblationPreset, EncoderConfig, TrainConfig};
use dgunfold::dataset::{generate_dataset, procedural_texture, CleanSource, DatasetManifest, DegradationDistribution, Range};
use dgunfold::degrade::{apply_blur, apply_haze, apply_lowlight, apply_noise, apply_rain, DegradationKind, DegradationSpec};
use dgunfold::diagnostics::{grad_check_suite, ista_equivalence, GRAD_TOL};
use dgunfold::encoder::{finetune, DegradationEncoder};
use dgunfold::metrics::{psnr, similarity_heatmap, MetricReport};
use dgunfold::nn::Graph;
use dgunfold::pipeline::{degraded_baseline, evaluate, load_encoder, load_restorer, save_encoder, save_restorer, train_restorer};
use dgunfold::unfolder::{back_project, project, ModelConfig};
use dgunfold::{Encoder32, Image, Restorer32, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 48;

// Encoder criterion.
const ENC_TRAIN: usize = 2000;
const ENC_HELD_OUT: usize = 250;

// Restoration criteria.
const RESTORE_TRAIN: usize = 2000;
const RESTORE_TEST: usize = 120;
const MAIN_EPOCHS: usize = 30;
const MAIN_SAMPLES: usize = 600;
const MAIN_CHANNELS: usize = 16;
const MAIN_BLOCKS: usize = 2;
const ABLATION_EPOCHS: usize = 12;
const ABLATION_SAMPLES: usize = 500;
const ABLATION_CHANNELS: usize = 8;
const ABLATION_BLOCKS: usize = 1;
const LR: f64 = 2e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, t: Instant) -> (bool, String) {
    let e = t.elapsed();
    (e <= limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn texture(size: usize, seed: u64) -> Image {
    procedural_texture(size, seed)
}

fn ista() -> Result<Outcome> {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let e = ista_equivalence(32, 64, 5, 0.05, 50, seed)?;
        worst = e.iter().cloned().fold(worst, f64::max);
    }
    let (fast, time) = within(Duration::from_secs(10), t);
    Ok(outcome(worst < 1e-5 && fast, format!("worst relative error {worst:.2e} over 20 seeds x 50 stages, {time}")))
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let suite = grad_check_suite(0)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, r) in &suite {
        ok &= r.passes(GRAD_TOL);
        parts.push(format!("{name}={:.1e}", r.max_rel_error));
    }
    let (fast, time) = within(Duration::from_secs(300), t);
    Ok(outcome(ok && fast, format!("{}, {time}", parts.join(" "))))
}

fn all_kinds() -> Vec<DegradationDistribution> {
    DegradationKind::ALL.iter().map(|k| DegradationDistribution::default_for(*k)).collect()
}

fn restoration_kinds() -> Vec<DegradationDistribution> {
    [DegradationKind::Noise, DegradationKind::Blur, DegradationKind::Rain].iter().map(|k| DegradationDistribution::default_for(*k)).collect()
}

struct Shared {
    encoder: Encoder32,
    train: DatasetManifest,
    test: DatasetManifest,
    baseline: MetricReport,
}

fn encoder_accuracy(enc: &Encoder32, m: &DatasetManifest) -> Result<(f64, bool)> {
    let mut hits = 0;
    let mut groups = Vec::new();
    let mut cols = Vec::new();
    for kind in m.kinds() {
        let mut imgs = Vec::new();
        let want = enc.label_index(kind)?;
        for i in (0..m.records.len()).filter(|&i| m.records[i].kind() == kind) {
            let y = m.load_pair(i)?.1;
            hits += usize::from(enc.classify(&y)? == want);
            imgs.push(y);
        }
        groups.push((kind.to_string(), imgs));
        cols.push(want);
    }
    let hm = similarity_heatmap(|y| enc.score_labels(y, EncoderConfig::default().gamma), &groups, enc.labels())?;
    Ok((hits as f64 / m.records.len() as f64, hm.dominant_at(&cols)))
}

fn encoder_criterion(root: &Path) -> Result<(Outcome, Encoder32)> {
    let t = Instant::now();
    let src = CleanSource::Procedural { size: SIZE };
    let train = generate_dataset(&src, &all_kinds(), ENC_TRAIN, 2, &root.join("enc_train"))?;
    let held = generate_dataset(&src, &all_kinds(), ENC_HELD_OUT, 77, &root.join("enc_held"))?;
    let cfg = EncoderConfig::default();
    let untuned = Encoder32::new(cfg.arch.clone(), cfg.train.seed)?;
    let mut enc = Encoder32::new(cfg.arch.clone(), cfg.train.seed)?;
    finetune(&mut enc, &train, &cfg.train, |_| {})?;
    let (acc, diag) = encoder_accuracy(&enc, &held)?;
    let (acc0, diag0) = encoder_accuracy(&untuned, &held)?;
    let (fast, time) = within(Duration::from_secs(600), t);
    let pass = acc >= 0.90 && diag && !diag0 && fast;
    let detail = format!(
        "held-out accuracy {acc:.3} (untuned {acc0:.3}), diagonal dominant {diag} (untuned {diag0}), {} images, {time}",
        held.records.len()
    );
    Ok((outcome(pass, detail), enc))
}

fn data_for_restoration(root: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let src = CleanSource::Procedural { size: SIZE };
    let train = generate_dataset(&src, &restoration_kinds(), RESTORE_TRAIN, 1, &root.join("res_train"))?;
    let mut test_dists = restoration_kinds();
    test_dists[0].set("sigma", Range::fixed(25.0))?;
    let test = generate_dataset(&src, &test_dists, RESTORE_TEST, 99, &root.join("res_test"))?;
    Ok((train, test))
}

fn train_and_eval(s: &Shared, preset: AblationPreset, seed: u64, channels: usize, blocks: usize, epochs: usize, samples: usize) -> Result<MetricReport> {
    let model = ModelConfig { channels, blocks: vec![blocks, blocks], seed, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs, warmup_epochs: 1, lr: LR, samples_per_epoch: samples, val_limit: 20, seed, preset, ..TrainConfig::default() };
    let enc: Option<&dyn DegradationEncoder> = Some(&s.encoder);
    let out = train_restorer::<f32>(&s.train, enc, &model, &cfg, |_| {})?;
    evaluate(&out.model, enc, &s.test)
}

fn restoration(s: &Shared) -> Result<Outcome> {
    let t = Instant::now();
    let r = train_and_eval(s, AblationPreset::TunedEncoder, 0, MAIN_CHANNELS, MAIN_BLOCKS, MAIN_EPOCHS, MAIN_SAMPLES)?;
    let (base, rest) = (s.baseline.per_kind(), r.per_kind());
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, b) in &base {
        let gain = rest[kind].psnr_db - b.psnr_db;
        ok &= gain >= 1.0;
        parts.push(format!("{kind} {:.2}->{:.2}", b.psnr_db, rest[kind].psnr_db));
    }
    let n = s.test.records.len();
    let mean_gain = r.overall().map_or(f64::NAN, |a| a.psnr_db) - s.baseline.overall().map_or(f64::NAN, |a| a.psnr_db);
    let (fast, time) = within(Duration::from_secs(1800), t);
    let pass = ok && mean_gain >= 3.0 && n >= 100 && fast;
    Ok(outcome(pass, format!("mean gain {mean_gain:.2} dB on {n} images ({}), {time}", parts.join(", "))))
}

fn ablation(s: &Shared) -> Result<Outcome> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut m = [0.0; 2];
        for (j, preset) in [AblationPreset::TunedEncoder, AblationPreset::NoEncoder].into_iter().enumerate() {
            let r = train_and_eval(s, preset, seed, ABLATION_CHANNELS, ABLATION_BLOCKS, ABLATION_EPOCHS, ABLATION_SAMPLES)?;
            m[j] = r.overall().map_or(f64::NAN, |a| a.psnr_db);
        }
        wins += usize::from(m[0] > m[1]);
        parts.push(format!("seed {seed} tuned {:.3} none {:.3}", m[0], m[1]));
    }
    Ok(outcome(wins >= 2, format!("tuned wins {wins}/3 ({})", parts.join(", "))))
}

fn operators() -> Result<Outcome> {
    let flat = Image::filled(32, 32, 0.5);
    let mut parts = Vec::new();
    let mut ok = true;
    for sigma in [15.0, 25.0, 50.0] {
        let expect = 20.0 * (255.0f64 / sigma).log10();
        let mean = (0..200).map(|s| psnr(&apply_noise(&flat, sigma, s)?, &flat, 1.0)).sum::<Result<f64>>()? / 200.0;
        ok &= (mean - expect).abs() <= 0.5;
        parts.push(format!("sigma {sigma}: {mean:.2} vs {expect:.2}"));
    }

    // Range, determinism and the affine structure of each operator.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut props = true;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    for trial in 0..20u64 {
        let a = texture(24, trial);
        let b = texture(24, trial + 100);
        let mid = a.map(|v| 0.3 + 0.4 * v);
        let lam: f64 = rng.random();
        let mix = Image::from_fn(24, 24, |x, y, c| lam * a.get(x, y, c) + (1.0 - lam) * b.get(x, y, c));
        for dist in all_kinds() {
            let spec = DegradationSpec::new(dist.sample(&mut rng)?, rng.random());
            let out = spec.apply(&a)?;
            props &= out.data().iter().all(|v| (0.0..=1.0).contains(v));
            props &= spec.apply(&a)? == out;
        }
        let (r, s) = (rng.random_range(1..4), rng.random_range(0.5..3.0));
        let (ba, bb, bm) = (apply_blur(&a, r, s)?, apply_blur(&b, r, s)?, apply_blur(&mix, r, s)?);
        props &= bm.data().iter().zip(ba.data().iter().zip(bb.data())).all(|(m, (x, y))| close(*m, lam * x + (1.0 - lam) * y));
        let (al, tr) = (rng.random_range(0.6..1.0), rng.random_range(0.3..0.9));
        let (ha, hb, hm) = (apply_haze(&a, al, tr)?, apply_haze(&b, al, tr)?, apply_haze(&mix, al, tr)?);
        props &= hm.data().iter().zip(ha.data().iter().zip(hb.data())).all(|(m, (x, y))| close(*m, lam * x + (1.0 - lam) * y));
        // Additive operators: the residual does not depend on the image where nothing clips.
        let seed = rng.random();
        let (na, nm) = (apply_noise(&a, 10.0, seed)?, apply_noise(&mid, 10.0, seed)?);
        props &= na.data().iter().zip(a.data()).zip(nm.data().iter().zip(mid.data())).all(|((y0, x0), (y1, x1))| {
            *y0 <= 0.0 || *y0 >= 1.0 || *y1 <= 0.0 || *y1 >= 1.0 || close(y0 - x0, y1 - x1)
        });
        let rain = DegradationSpec::new(dist_sample(DegradationKind::Rain, &mut rng)?, seed);
        let (ra, rm) = (apply_rain(&a, &rain)?, apply_rain(&mid, &rain)?);
        props &= ra.data().iter().zip(a.data()).zip(rm.data().iter().zip(mid.data())).all(|((y0, x0), (y1, x1))| {
            *y0 >= 1.0 || *y1 >= 1.0 || close(y0 - x0, y1 - x1)
        });
        // Low light is monotone rather than affine.
        let (g, k) = (rng.random_range(1.5..3.0), rng.random_range(0.3..1.0));
        let (la, lm) = (apply_lowlight(&a, g, k)?, apply_lowlight(&mid, g, k)?);
        props &= la.data().iter().zip(a.data()).zip(lm.data().iter().zip(mid.data())).all(|((y0, x0), (y1, x1))| (x0 <= x1) == (y0 <= y1) || close(*y0, *y1));
    }
    parts.push(format!("operator properties {}", if props { "hold" } else { "violated" }));
    Ok(outcome(ok && props, parts.join(", ")))
}

fn dist_sample(kind: DegradationKind, rng: &mut ChaCha8Rng) -> Result<dgunfold::degrade::Degradation> {
    DegradationDistribution::default_for(kind).sample(rng)
}

fn identity() -> Result<Outcome> {
    let model = Restorer32::new(ModelConfig::default())?;
    let d = vec![1.0 / (64f64).sqrt(); 64];
    let mut worst = f64::INFINITY;
    for seed in 0..5 {
        let y = texture(32, seed);
        worst = worst.min(psnr(&model.restore(&y, Some(&d))?, &y, 1.0)?);
    }
    Ok(outcome(worst > 40.0, format!("lowest PSNR {worst:.1} dB over 5 textures")))
}

fn round_trip() -> Result<Outcome> {
    let model = Restorer32::new(ModelConfig::default())?;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let y = texture(32, seed);
        let mut g = Graph::new(&model.params);
        let yv = g.constant(y.to_tensor());
        let p = project(&mut g, yv, model.transform())?;
        let b = back_project(&mut g, p, model.transform())?;
        worst = worst.max(g.value(b).max_abs_diff(g.value(yv)) as f64);
    }
    Ok(outcome(worst < 1e-5, format!("max abs error {worst:.2e}")))
}

fn tiny_pipeline(root: &Path) -> Result<(String, Vec<u8>)> {
    let dists: Vec<_> = [DegradationKind::Noise, DegradationKind::Blur, DegradationKind::Rain].iter().map(|k| DegradationDistribution::default_for(*k)).collect();
    let data = generate_dataset(&CleanSource::Procedural { size: 16 }, &dists, 30, 3, &root.join("data"))?;
    let mut ecfg = EncoderConfig::default();
    ecfg.arch.dim = 8;
    ecfg.arch.widths = vec![4, 4];
    ecfg.train.epochs = 2;
    ecfg.train.batch_size = 4;
    ecfg.train.warmup_epochs = 1;
    ecfg.train.backbone_warm_epochs = 1;
    let mut enc = Encoder32::new(ecfg.arch.clone(), ecfg.train.seed)?;
    finetune(&mut enc, &data, &ecfg.train, |_| {})?;
    save_encoder(&root.join("encoder.ckpt"), &enc, &ecfg, "tiny")?;
    let (enc, _, _) = load_encoder::<f32>(&root.join("encoder.ckpt"))?;
    let model = ModelConfig { channels: 4, blocks: vec![1, 1], degradation_dim: 8, num_keys: 3, ..ModelConfig::default() };
    let tcfg = TrainConfig { epochs: 2, warmup_epochs: 0, batch_size: 4, crop_size: 8, lr: 1e-3, ..TrainConfig::default() };
    let e: Option<&dyn DegradationEncoder> = Some(&enc);
    let out = train_restorer::<f32>(&data, e, &model, &tcfg, |_| {})?;
    let ckpt = root.join("restorer.ckpt");
    save_restorer(&ckpt, &out.model, tcfg.preset, "tiny")?;
    let (model, _, _) = load_restorer::<f32>(&ckpt)?;
    let report = evaluate(&model, e, &data)?;
    let bytes = std::fs::read(&ckpt).map_err(|err| dgunfold::Error::io(&ckpt, err))?;
    Ok((report.to_text(), bytes))
}

fn determinism(root: &Path) -> Result<Outcome> {
    let (r1, c1) = tiny_pipeline(&root.join("run1"))?;
    let (r2, c2) = tiny_pipeline(&root.join("run2"))?;
    Ok(outcome(r1 == r2 && c1 == c2, format!("reports identical {}, checkpoints identical {}", r1 == r2, c1 == c2)))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let mut results: Vec<(u32, &str, Result<Outcome>)> = Vec::new();
    let mut report = |n: u32, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => println!("criterion {n} {name}: FAIL (error: {e})"),
        }
        results.push((n, name, r));
    };

    if wanted(1) {
        report(1, "unfolded ISTA matches the oracle", ista());
    }
    if wanted(2) {
        report(2, "gradient checks", gradients());
    }
    let mut encoder = None;
    if wanted(3) || wanted(4) || wanted(5) {
        match encoder_criterion(root) {
            Ok((o, enc)) => {
                encoder = Some(enc);
                if wanted(3) {
                    report(3, "encoder accuracy and heat map", Ok(o));
                }
            }
            Err(e) => report(3, "encoder accuracy and heat map", Err(e)),
        }
    }
    if wanted(4) || wanted(5) {
        let shared = encoder.ok_or_else(|| dgunfold::Error::Param("encoder unavailable".into())).and_then(|encoder| {
            let (train, test) = data_for_restoration(root)?;
            let baseline = degraded_baseline(&test)?;
            Ok(Shared { encoder, train, test, baseline })
        });
        match shared {
            Ok(s) => {
                if wanted(4) {
                    report(4, "restoration gain over the degraded input", restoration(&s));
                }
                if wanted(5) {
                    report(5, "tuned encoder beats no encoder", ablation(&s));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for (n, name) in [(4, "restoration gain over the degraded input"), (5, "tuned encoder beats no encoder")] {
                    if wanted(n) {
                        report(n, name, Err(dgunfold::Error::Param(msg.clone())));
                    }
                }
            }
        }
    }
    if wanted(6) {
        report(6, "degradation operators", operators());
    }
    if wanted(7) {
        report(7, "identity at initialization", identity());
    }
    if wanted(8) {
        report(8, "orthonormal transform round trip", round_trip());
    }
    if wanted(9) {
        report(9, "bit-identical pipeline reruns", determinism(root));
    }

    let passed = results.iter().filter(|r| matches!(&r.2, Ok(o) if o.pass)).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
