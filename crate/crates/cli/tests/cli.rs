//! End-to-end runs of the `vipo` binary on a tiny profile.

use std::path::Path;
use std::process::{Command, Output};

fn vipo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vipo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
checkpoint = "out/pre.vipc"
output = "out"
data.per_class = 2
model.hidden = 4
model.layers = 2
pretrain.steps = 5
pretrain.batch = 2
sampler.steps = 2
train.group_size = 2
train.groups_per_update = 1
train.updates = 2
experiment.seeds = [0, 1]
experiment.milestones = [0, 2]
experiment.eval_samples = 2
experiment.smoothing_window = 2
ablation.updates = 1
ablation.k_values = [1]
ablation.sigmas = ["off"]
"#;

#[test]
fn pretrain_render_train_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];

    let missing = vipo(&["render", cfg[0], cfg[1]], d);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("vipo pretrain"));

    let out = vipo(&["pretrain", cfg[0], cfg[1]], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("out/pre.vipc").exists());

    let out = vipo(&["render", cfg[0], cfg[1], "--dump-maps"], d);
    assert!(out.status.success());
    assert!(d.join("out/render/samples_u0000.ppm").exists());
    assert!(d.join("out/render/maps_u0000.pgm").exists());

    let out = vipo(&["train", cfg[0], cfg[1], "--seed", "7"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(d.join("out/redness/summary.csv")).unwrap();
    // One seed, two algorithms.
    assert_eq!(summary.lines().count(), 3);
    assert!(d.join("out/redness/seed7/vipo/metrics.csv").exists());

    let out = vipo(&["ablate", cfg[0], cfg[1], "--out", "elsewhere"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("elsewhere/ablation/ablation.csv").exists());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "train.speed = 3").unwrap();
    let out = vipo(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.speed"));
    let out = vipo(&["render", "--config", "absent.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
