use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgunfold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgunfold")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = "\
[data]
count = 30
size = 16
kinds = noise, blur, rain
seed = 3

[encoder]
dim = 8
widths = 4, 4
epochs = 2
warmup_epochs = 1
batch_size = 4
backbone_warm_epochs = 1

[model]
channels = 4
blocks = 1, 1
degradation_dim = 8
num_keys = 3

[train]
epochs = 1
warmup_epochs = 0
batch_size = 4
crop_size = 8
lr = 1e-3
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.txt");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_on_every_subcommand() {
    assert_eq!(code(&dgunfold(&["--help"])), 0);
    for sub in ["synth", "train-encoder", "train-restorer", "eval", "heatmap", "degradation-map", "oracle-trace", "grad-check"] {
        let o = dgunfold(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--config") && text.contains("--seed") && text.contains("--out"), "{sub}: {text}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let o = dgunfold(&["restore-everything"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&dgunfold(&["synth", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&dgunfold(&["synth"])), 2);
    assert_eq!(code(&dgunfold(&["train-restorer", "--out", "x", "--data", "y", "--preset", "nope"])), 2);
}

#[test]
fn config_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ncolour = 1\n");
    let out = dir.path().join("o");
    let o = dgunfold(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&dgunfold(&["synth", "--config", missing.to_str().unwrap(), "--out", "x"])), 1);
    let nodata = dir.path().join("nodata");
    assert_eq!(code(&dgunfold(&["train-encoder", "--data", nodata.to_str().unwrap(), "--out", out.to_str().unwrap()])), 1);
}

#[test]
fn synth_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = dgunfold(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--count", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn oracle_trace_and_grad_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = dgunfold(&["oracle-trace", "--out", out.to_str().unwrap(), "--seed", "4", "--iters", "10"]);
    assert_eq!(code(&o), 0);
    let trace = fs::read_to_string(out.join("oracle_trace.txt")).unwrap();
    assert_eq!(trace.lines().count(), 11);
    assert!(out.join("unfolded_trace.txt").exists());
    let o = dgunfold(&["grad-check", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.ends_with("pass")));
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let o = dgunfold(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth", "--config", &cfg, "--out", &p("data")]);
    let o = run(&["train-encoder", "--config", &cfg, "--data", &p("data"), "--out", &p("enc")]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("epoch 1 loss "));
    let enc = p("enc/encoder.ckpt");
    let o = run(&["train-restorer", "--config", &cfg, "--data", &p("data"), "--encoder", &enc, "--out", &p("res")]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("val_psnr"));
    run(&["eval", "--config", &cfg, "--data", &p("data"), "--checkpoint", &p("res/restorer.ckpt"), "--encoder", &enc, "--out", &p("eval")]);
    let report = fs::read_to_string(dir.path().join("eval/report.txt")).unwrap();
    assert!(report.contains("mean all n=30"), "{report}");
    run(&["heatmap", "--config", &cfg, "--data", &p("data"), "--encoder", &enc, "--out", &p("hm")]);
    assert!(dir.path().join("hm/heatmap.png").exists());
    let img = p("data/degraded/00000.png");
    run(&["degradation-map", "--checkpoint", &p("res/restorer.ckpt"), "--encoder", &enc, "--input", &img, "--out", &p("maps")]);
    assert!(dir.path().join("maps/00000_map.png").exists());

    // Missing encoder for a checkpoint that needs one.
    let o = dgunfold(&["eval", "--data", &p("data"), "--checkpoint", &p("res/restorer.ckpt"), "--out", &p("eval2")]);
    assert_eq!(code(&o), 2);
    // No encoder needed under the no_encoder preset.
    run(&["train-restorer", "--config", &cfg, "--data", &p("data"), "--preset", "no_encoder", "--out", &p("ne")]);
    run(&["eval", "--config", &cfg, "--data", &p("data"), "--checkpoint", &p("ne/restorer.ckpt"), "--out", &p("eval3")]);
}
