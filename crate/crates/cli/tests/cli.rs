use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use koopnet::data::{encode_idx_images, encode_idx_labels, RawImages};
use koopnet::experiment::{DatasetConfig, ExperimentConfig, STALE_MARKER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=10",
    "--set",
    "dictionary.len=40",
    "--set",
    "sweep.lens=[21,30]",
    "--set",
    "sweep.ranks=[2,5,20]",
    "--set",
    "prune.ratios=[0.5]",
    "--set",
    "prune.finetune_epochs=1",
    "--set",
    "tt.n_max=[1,2]",
    "--set",
    "tt.snapshots=200",
    "--set",
    "tt.test_points=20",
];

/// Ten classes, each lighting its own horizontal band of the image.
fn write_toy_data(dir: &Path) -> PathBuf {
    let data = dir.join("toy");
    std::fs::create_dir_all(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut make = |n: usize| {
        let mut pixels = vec![0u8; n * 784];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = rng.random_range(0..10u8);
            for p in 0..784 {
                let base = if (p * 10 / 784) as u8 == class { 200 } else { 30 };
                pixels[i * 784 + p] = base + rng.random_range(0..50u8);
            }
            labels.push(class);
        }
        (RawImages { count: n, rows: 28, cols: 28, pixels }, labels)
    };
    let ds = DatasetConfig::standard("toy", &data);
    let (train, train_labels) = make(2000);
    let (test, test_labels) = make(300);
    std::fs::write(&ds.train_images, encode_idx_images(&train)).unwrap();
    std::fs::write(&ds.train_labels, encode_idx_labels(&train_labels)).unwrap();
    std::fs::write(&ds.test_images, encode_idx_images(&test)).unwrap();
    std::fs::write(&ds.test_labels, encode_idx_labels(&test_labels)).unwrap();
    data
}

fn koopnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopnet")).args(args).output().expect("binary runs")
}

/// Runs a subcommand against the toy data with the small settings.
fn stage(cmd: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--data-dir", data.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    koopnet(&args)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn init_config_prints_a_loadable_config() {
    let text = ok(koopnet(&["init-config", "--data-dir", "data/fashion", "--dataset", "fashion"]));
    let config = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(config.dataset.name, "fashion");
    assert_eq!(config.dataset.train_images, Path::new("data/fashion/train-images-idx3-ubyte"));
    assert_eq!(config.network.layer_sizes, vec![784, 20, 20, 20, 20, 20, 10]);
}

#[test]
fn staged_commands_fill_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy_data(tmp.path());
    let out = tmp.path().join("run");

    let training: serde_json::Value = serde_json::from_str(&ok(stage("train", &data, &out, &[]))).unwrap();
    assert!(training["test_accuracy"].as_f64().unwrap() > 0.5, "{training}");
    assert!(ok(stage("snapshots", &data, &out, &[])).contains("snapshot pairs of dimension 20"));
    ok(stage("fit", &data, &out, &[]));
    let metrics: serde_json::Value = serde_json::from_str(&ok(stage("compress", &data, &out, &["--rank", "5"]))).unwrap();
    assert_eq!(metrics["rank"], 5);
    for method in ["unstructured", "structured"] {
        let args = ["--method", method, "--ratio", "0.5"];
        let pruned: serde_json::Value = serde_json::from_str(&ok(stage("prune", &data, &out, &args))).unwrap();
        assert!((pruned["compression_ratio"].as_f64().unwrap() - 0.5).abs() < 0.05);
        let tuned: serde_json::Value = serde_json::from_str(&ok(stage("finetune", &data, &out, &args))).unwrap();
        assert!(tuned["finetuned_test_accuracy"].is_number());
    }
    assert!(ok(stage("sweep", &data, &out, &[])).contains("8 cells"));
    ok(stage("compare", &data, &out, &[]));
    assert!(ok(stage("tt", &data, &out, &[])).contains("N_max = 2"));
    let report = ok(stage("report", &data, &out, &[]));
    assert!(report.contains("original network"));
    assert!(report.contains("frontier"));

    for file in [
        "config.toml",
        "network.bin",
        "snapshots.bin",
        "koopman.bin",
        "koopman-rank5.bin",
        "sweep.csv",
        "frontier.csv",
        "comparison.csv",
        "tt.csv",
        "report.json",
        "manifest.json",
        "pruned-unstructured-0.5.mask",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    assert!(!out.join(STALE_MARKER).exists());
}

#[test]
fn repeated_runs_pass_the_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy_data(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(stage("run", &data, &a, &[]));
    ok(stage("run", &data, &b, &[]));
    assert!(ok(koopnet(&["audit", a.to_str().unwrap(), b.to_str().unwrap()])).contains("files identical"));

    let c = tmp.path().join("c");
    ok(stage("run", &data, &c, &["--seed", "7"]));
    let out = koopnet(&["audit", a.to_str().unwrap(), c.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy_data(tmp.path());
    let out = tmp.path().join("run");

    // fit before snapshots exist
    let fit = stage("fit", &data, &out, &[]);
    assert_eq!(fit.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fit.stderr).starts_with("error:"));
    assert!(out.join(STALE_MARKER).exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "output_dir = \"x\"\nbogus = 1\n").unwrap();
    let parsed = koopnet(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(parsed.status.code(), Some(1));

    let missing = koopnet(&["train", "--data-dir", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));

    let invalid = stage("train", &data, &out, &["--set", "dataset.val_fraction=1.5"]);
    assert_eq!(invalid.status.code(), Some(1));
}

#[test]
fn shipped_configs_load_with_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mnist", "fashion"] {
        let config = ExperimentConfig::load(dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(config.dataset.name, name);
        let defaults = ExperimentConfig::new(&config.output_dir, DatasetConfig::standard(name, format!("data/{name}")));
        assert_eq!(config.sweep, defaults.sweep);
        assert_eq!(config.prune, defaults.prune);
        assert_eq!(config.tt, defaults.tt);
    }
}
