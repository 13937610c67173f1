use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgunfold::config::{AblationPreset, Config};
use dgunfold::dataset::{generate_dataset, DatasetManifest, MANIFEST_FILE};
use dgunfold::diagnostics::{grad_check_suite, ista_equivalence, GRAD_TOL};
use dgunfold::encoder::{finetune, DegradationEncoder};
use dgunfold::metrics::{similarity_heatmap, SimilarityMatrix};
use dgunfold::nn::checkpoint::atomic_write;
use dgunfold::oracle::{compressive_sensing, ista_iterate, trace_text};
use dgunfold::pipeline::{
    degradation_map, degraded_baseline, encoder_for_preset, evaluate, load_encoder, load_restorer, save_encoder,
    save_restorer, train_restorer,
};
use dgunfold::unfolder::{ista_mode_forward, ModelConfig};
use dgunfold::{Encoder32, Error, Image, Result};

const ENCODER_FILE: &str = "encoder.ckpt";
const RESTORER_FILE: &str = "restorer.ckpt";

#[derive(Parser)]
#[command(name = "dgunfold", version, about = "Degradation-guided unfolding restoration pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage this subcommand runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of pairs, overriding the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastively fine-tune the degradation encoder.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the unfolding restorer.
    TrainRestorer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned encoder checkpoint.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Ablation preset, overriding the config.
        #[arg(long)]
        preset: Option<AblationPreset>,
    },
    /// Score a restorer checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Image-label similarity heat map of an encoder.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; a random initialization from the config seed when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Normalized first-stage degradation residuals as PNGs.
    DegradationMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Input images.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Unfolded ISTA against the dense reference on a compressive-sensing instance.
    OracleTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        sparsity: usize,
        #[arg(long, default_value_t = 0.05)]
        lam: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Finite-difference check of every learnable module.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn manifest_in(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join(MANIFEST_FILE))
}

fn optional_encoder(path: Option<&Path>) -> Result<Option<Encoder32>> {
    path.map(|p| load_encoder::<f32>(p).map(|(e, _, _)| e)).transpose()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, count } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            if let Some(c) = count {
                cfg.data.count = c;
            }
            cfg.validate()?;
            let m = generate_dataset(&cfg.data.source(), &cfg.data.selected(), cfg.data.count, cfg.data.seed, &common.out)?;
            let (train, val) = m.split();
            println!("wrote {} pairs ({} train, {} val) to {}", m.records.len(), train.len(), val.len(), common.out.display());
        }
        Command::TrainEncoder { common, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.encoder.train.seed = s;
            }
            cfg.validate()?;
            let m = manifest_in(&data)?;
            let mut enc = Encoder32::new(cfg.encoder.arch.clone(), cfg.encoder.train.seed)?;
            let mut log = String::new();
            let curve = finetune(&mut enc, &m, &cfg.encoder.train, |l| {
                println!("{l}");
                log.push_str(l);
                log.push('\n');
            })?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            save_encoder(&common.out.join(ENCODER_FILE), &enc, &cfg.encoder, &cfg.hash())?;
            write_text(&common.out.join("encoder_log.txt"), &log)?;
            if let Some((a, b)) = curve.windowed(3) {
                println!("loss first {a:.6} last {b:.6}");
            }
        }
        Command::TrainRestorer { common, data, encoder, preset } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
            }
            if let Some(p) = preset {
                cfg.train.preset = p;
            }
            cfg.validate()?;
            let preset = cfg.train.preset;
            let m = manifest_in(&data)?;
            let enc = encoder_for_preset(preset, &cfg.encoder, optional_encoder(encoder.as_deref())?)?;
            let dyn_enc = enc.as_ref().map(|e| e as &dyn DegradationEncoder);
            let mut log = String::new();
            let out = train_restorer::<f32>(&m, dyn_enc, &cfg.model, &cfg.train, |l| {
                println!("{l}");
                log.push_str(l);
                log.push('\n');
            })?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let hash = cfg.hash();
            save_restorer(&common.out.join(RESTORER_FILE), &out.model, preset, &hash)?;
            if let (AblationPreset::FrozenEncoder, Some(e)) = (preset, &enc) {
                save_encoder(&common.out.join(ENCODER_FILE), e, &cfg.encoder, &hash)?;
            }
            write_text(&common.out.join("train_log.txt"), &log)?;
            write_text(&common.out.join("config.txt"), &cfg.to_text())?;
        }
        Command::Eval { common, data, checkpoint, encoder } => {
            let _ = load_config(&common)?;
            let m = manifest_in(&data)?;
            let (model, preset, _) = load_restorer::<f32>(&checkpoint)?;
            let enc = optional_encoder(encoder.as_deref())?;
            if model.uses_encoder() && enc.is_none() {
                return Err(Error::Config(format!("checkpoint trained with preset {preset} needs --encoder")));
            }
            let dyn_enc = enc.as_ref().map(|e| e as &dyn DegradationEncoder);
            let report = evaluate(&model, dyn_enc, &m)?;
            let base = degraded_baseline(&m)?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            write_text(&common.out.join("report.txt"), &report.to_text())?;
            write_text(&common.out.join("baseline_report.txt"), &base.to_text())?;
            let (Some(o), Some(b)) = (report.overall(), base.overall()) else {
                return Err(Error::Dataset("empty dataset".into()));
            };
            println!("restored psnr {:.2} ssim {:.4} | degraded psnr {:.2} ssim {:.4}", o.psnr_db, o.ssim, b.psnr_db, b.ssim);
        }
        Command::Heatmap { common, data, encoder } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.encoder.train.seed = s;
            }
            let m = manifest_in(&data)?;
            let enc = match optional_encoder(encoder.as_deref())? {
                Some(e) => e,
                None => Encoder32::new(cfg.encoder.arch.clone(), cfg.encoder.train.seed)?,
            };
            let mut groups: Vec<(String, Vec<Image>)> = Vec::new();
            for kind in m.kinds() {
                let imgs = (0..m.records.len())
                    .filter(|&i| m.records[i].kind() == kind)
                    .map(|i| m.load_pair(i).map(|p| p.1))
                    .collect::<Result<Vec<_>>>()?;
                groups.push((kind.to_string(), imgs));
            }
            let gamma = cfg.encoder.gamma;
            let hm: SimilarityMatrix = similarity_heatmap(|y| enc.score_labels(y, gamma), &groups, enc.labels())?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            hm.save(&common.out.join("heatmap.png"), &common.out.join("heatmap.txt"))?;
            print!("{}", hm.to_text());
            let cols = m.kinds().into_iter().map(|k| enc.label_index(k)).collect::<Result<Vec<_>>>()?;
            println!("diagonal_dominant {}", hm.dominant_at(&cols));
        }
        Command::DegradationMap { common, checkpoint, encoder, input } => {
            let _ = load_config(&common)?;
            let (model, _, _) = load_restorer::<f32>(&checkpoint)?;
            let enc = optional_encoder(encoder.as_deref())?;
            if model.uses_encoder() && enc.is_none() {
                return Err(Error::Config("checkpoint needs --encoder".into()));
            }
            let dyn_enc = enc.as_ref().map(|e| e as &dyn DegradationEncoder);
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            for p in &input {
                let y = Image::load_png(p)?;
                let map = degradation_map(&model, dyn_enc, &y)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                let dst = common.out.join(format!("{stem}_map.png"));
                map.save_png(&dst)?;
                println!("{}", dst.display());
            }
        }
        Command::OracleTrace { common, m, n, sparsity, lam, iters } => {
            let _ = load_config(&common)?;
            let seed = common.seed.unwrap_or(0);
            if m == 0 || n == 0 || iters == 0 {
                return Err(Error::Config("m, n and iters must be positive".into()));
            }
            let (p, _) = compressive_sensing(m, n, sparsity, lam, seed);
            let reference = ista_iterate(&p, iters)?;
            let cfg = ModelConfig::ista_debug(iters, p.rho * p.lam);
            let unfolded = ista_mode_forward(&cfg, &p.phi, m, n, &p.y, &p.x0, p.rho)?;
            let errors = ista_equivalence(m, n, sparsity, lam, iters, seed)?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            write_text(&common.out.join("oracle_trace.txt"), &trace_text(&p, &reference)?)?;
            write_text(&common.out.join("unfolded_trace.txt"), &trace_text(&p, &unfolded)?)?;
            let worst = errors.iter().cloned().fold(0.0, f64::max);
            println!("stages {iters} max relative error {worst:.3e}");
        }
        Command::GradCheck { common } => {
            let _ = load_config(&common)?;
            let seed = common.seed.unwrap_or(0);
            let mut text = String::new();
            let mut ok = true;
            for (name, r) in grad_check_suite(seed)? {
                let pass = r.passes(GRAD_TOL);
                ok &= pass;
                let line = format!(
                    "{name} checked={} skipped={} max_rel_error={:.3e} {}",
                    r.checked,
                    r.skipped,
                    r.max_rel_error,
                    if pass { "pass" } else { "FAIL" }
                );
                println!("{line}");
                text.push_str(&line);
                text.push('\n');
            }
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            write_text(&common.out.join("gradcheck.txt"), &text)?;
            if !ok {
                return Err(Error::Model(format!("gradient check above {GRAD_TOL}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
