use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hetgrow::harness::{DatasetConfig, RunConfig, TargetSpec};
use hetgrow::model::ModelConfig;

fn hetgrow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetgrow")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Small synthetic run with growth at epochs 2 and 4.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk(5);
    cfg.run_id = "tiny".into();
    cfg.output_dir = dir.join("runs");
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.model = ModelConfig {
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        ..ModelConfig::desk()
    };
    cfg.dataset = DatasetConfig {
        train_size: 64,
        eval_size: 32,
        ..DatasetConfig::synthetic(Some(4))
    };
    cfg.schedule.initial_warmup = 2;
    cfg.schedule.scaling_interval = 2;
    cfg.schedule.layer_threshold = 1;
    cfg.schedule.spectrum.max_batches = 1;
    cfg.schedule.target = Some(TargetSpec {
        params: None,
        ratio: Some(1.2),
        tolerance: None,
        relative_tolerance: Some(0.05),
    });
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn count_preset_reports_reduced_deit() {
    let out = hetgrow(&["count", "deit-s-reduced"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let row = text.lines().find(|l| l.starts_with("deit-s /2,/2")).unwrap();
    let params: usize = row.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!((params as f64 / 11.0e6 - 1.0).abs() <= 0.02, "{params}");
}

#[test]
fn count_reads_config_files() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let out = hetgrow(&["count", root.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("105866"));
}

#[test]
fn dry_run_plan_on_positive_spectrum_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("fc1.csv");
    fs::write(
        &csv,
        "epoch,layer_id,neuron_index,min_eigval\n3,blocks.0.mlp.fc1,0,0.5\n3,blocks.0.mlp.fc1,1,1.25\n",
    )
    .unwrap();
    let out = hetgrow(&[
        "plan", "--dry-run", "--spectra", csv.to_str().unwrap(), "--fan-in", "64", "--budget", "1000", "--threshold", "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["entries"].as_array().unwrap().len(), 0);
    assert_eq!(plan["projected_param_delta"], 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty plan"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(hetgrow(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hetgrow(&["count", "desk", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(hetgrow(&["plan", "--spectra", "x.csv", "--fan-in", "4", "--budget", "1"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = hetgrow(&["eval", "/nonexistent/ckpt.json", "synthetic"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_eval_spectra_plan_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = hetgrow(&["train", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let field = |key: &str| text.lines().find(|l| l.starts_with(key)).unwrap().split_whitespace().nth(1).unwrap().to_string();
    assert!(field("events").parse::<usize>().unwrap() >= 1);
    let ckpt = field("checkpoint");
    assert!(Path::new(&ckpt).exists());
    let run_dir = dir.path().join("runs/tiny");
    assert!(run_dir.join("metrics.jsonl").exists());

    let first = hetgrow(&["eval", &ckpt, "synthetic:4"]);
    let second = hetgrow(&["eval", &ckpt, "synthetic:4"]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    // The shorthand uses the default synthetic split sizes, not the run's.
    let samples = format!("samples {}\n", DatasetConfig::synthetic(None).eval_size);
    assert!(stdout(&first).starts_with(&samples), "{}", stdout(&first));

    let out_dir = dir.path().join("offline");
    let spectra = hetgrow(&[
        "spectra", &ckpt, "synthetic:4", "--layers", "fc1,qkv", "--batches", "1", "--batch-size", "16",
        "--output-dir", out_dir.to_str().unwrap(),
    ]);
    assert!(spectra.status.success(), "{}", String::from_utf8_lossy(&spectra.stderr));
    let csvs: Vec<_> = walk(&out_dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    assert_eq!(csvs.len(), 2, "{csvs:?}");

    let mut args = vec!["plan", "--dry-run", "--checkpoint", &ckpt, "--budget", "100000", "--threshold", "1", "--spectra"];
    let names: Vec<String> = csvs.iter().map(|p| p.to_str().unwrap().to_string()).collect();
    args.extend(names.iter().map(String::as_str));
    let plan = hetgrow(&args);
    assert!(plan.status.success(), "{}", String::from_utf8_lossy(&plan.stderr));
    let plan: serde_json::Value = serde_json::from_slice(&plan.stdout).unwrap();
    assert!(plan["projected_param_delta"].as_u64().unwrap() <= 100_000);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
