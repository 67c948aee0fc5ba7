use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
dataset = "toy_subset"
image_size = 16
num_classes = 2
toy_train_per_class = 4
toy_eval_per_class = 2
cbr = "1/12"
snr_db = 10.0
fading = "awgn"
blocks = [1, 1]
widths = [8, 16]
window_size = 2
epochs = [1, 1, 1]
batch_size = 4
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtml-rsc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn selftest_passes() {
    let o = cli(&["selftest"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = cli(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("Usage"));
}

#[test]
fn stage3_without_checkpoints_is_a_stage_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = cli(&["--config", &cfg, "--out", out.to_str().unwrap(), "train", "--stage", "3"]);
    assert!(!o.status.success());
    let msg = text(&o);
    assert!(msg.contains("stage"), "{msg}");
    assert!(!out.join("stage3_mtml_destination.safetensors").exists());
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, TINY.replace("image_size = 16", "image_size = 18")).unwrap();
    let o = cli(&["--config", p.to_str().unwrap(), "train"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("image_size"), "{}", text(&o));
}

#[test]
fn train_eval_sweep_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = cli(&["--config", &cfg, "--out", out_s, "train"]);
    assert!(o.status.success(), "{}", text(&o));
    for f in [
        "stage1_source_relay_codec.safetensors",
        "stage2_relay_classifier.safetensors",
        "config.toml",
        "train_log.tsv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let o = cli(&["--config", &cfg, "--out", out_s, "eval"]);
    assert!(o.status.success(), "{}", text(&o));
    let table = mtml_rsc::ResultsTable::read(&out.join("results.csv")).unwrap();
    assert_eq!(table.len(), 2);

    let o = cli(&["--config", &cfg, "--out", out_s, "sweep", "--axis", "snr", "--points", "-5,5"]);
    assert!(o.status.success(), "{}", text(&o));
    let table = mtml_rsc::ResultsTable::read(&out.join("results.csv")).unwrap();
    assert_eq!(table.len(), 6);

    let plots = dir.path().join("plots");
    let o = cli(&[
        "--out",
        plots.to_str().unwrap(),
        "plot",
        "--results",
        out.join("results.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(plots.join("psnr_vs_snr_awgn.png").exists());
    assert!(plots.join("accuracy_vs_snr_awgn.png").exists());
}

#[test]
fn sweep_can_require_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = cli(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "sweep",
        "--points",
        "0",
        "--require-checkpoints",
    ]);
    assert!(!o.status.success());
}
