//! End-to-end tests of the `smoot` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smoot::data::{generate_planted, write_idx, PlantedSpec};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smoot"));
    cmd.env_remove("SMOOT_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

/// Planted data also persisted as IDX so eval/diagnose can re-read it.
fn planted_idx_dir(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut spec = PlantedSpec::default_28x28();
    spec.seed = 5;
    let (train, _) = generate_planted::<f32>(&spec, 48).unwrap();
    let (test, _) = {
        spec.seed = 6;
        generate_planted::<f32>(&spec, 24).unwrap()
    };
    write_idx(
        &train,
        data.join("train-images-idx3-ubyte"),
        data.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    write_idx(
        &test,
        data.join("t10k-images-idx3-ubyte"),
        data.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    data
}

fn base_config(out_dir: &Path, method: &str) -> serde_json::Value {
    serde_json::json!({
        "method": method,
        "epochs": 2,
        "batch_size": 12,
        "n": 4,
        "seed": 11,
        "hidden": 16,
        "planted": {"n_train": 36, "n_test": 12},
        "out_dir": out_dir,
    })
}

#[test]
fn traditional_metrics_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "cfg.json", base_config(&run, "traditional"));
    run_ok(bin().arg("train").arg("--config").arg(&cfg));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        rows[0],
        "epoch,train_acc,test_acc,ce_loss,kl_loss,k_min,k_median,k_max"
    );
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(&cols[5..], &["0", "0", "0"]);
    }
    // resolved config echoes the filled-in defaults
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["tau"], 1.0);
    assert_eq!(resolved["optimizer"], "adadelta");
    assert_eq!(resolved["k_init"], 392);
}

#[test]
fn smoot_k_columns_stay_within_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "cfg.json", base_config(&run, "smoot"));
    run_ok(bin().arg("train").arg("--config").arg(&cfg));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let (k_min_bound, k_max_bound) = (156.0, 627.0); // floor(0.2*784), floor(0.8*784)
    for row in metrics.lines().skip(1) {
        let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        for &k in &cols[5..] {
            assert!((k_min_bound..=k_max_bound).contains(&k), "{row}");
        }
    }
    let state = std::fs::read_to_string(run.join("mask_state.csv")).unwrap();
    assert_eq!(state.lines().count(), 37); // header + one row per sample
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&run_a, &run_b] {
        let cfg = write_config(dir.path(), "cfg.json", base_config(run, "smoot"));
        run_ok(bin().arg("train").arg("--config").arg(&cfg));
    }
    for file in ["metrics.csv", "mask_state.csv", "model.smot"] {
        assert_eq!(
            std::fs::read(run_a.join(file)).unwrap(),
            std::fs::read(run_b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn smoot_seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "cfg.json", base_config(&run, "sgt"));
    run_ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .env("SMOOT_SEED", "99"));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 99);
}

#[test]
fn invalid_config_exits_2_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(&dir.path().join("run"), "smoot");
    body["alpha"] = serde_json::json!(2.0);
    let cfg = write_config(dir.path(), "cfg.json", body);
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn missing_data_exits_4() {
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent.smot", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_diagnose_and_export_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted_idx_dir(dir.path());
    let run = dir.path().join("run");
    let mut body = base_config(&run, "traditional");
    body["planted"] = serde_json::Value::Null;
    body["data_dir"] = serde_json::json!(data);
    let cfg = write_config(dir.path(), "cfg.json", body);
    run_ok(bin().arg("train").arg("--config").arg(&cfg));
    let ckpt = run.join("model.smot");

    // eval: summary consistent with the curve, zero k without a sidecar
    let eval_out = dir.path().join("eval");
    run_ok(bin().args([
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval_out.join("eval_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["method"], "traditional");
    assert_eq!(summary["k_min"], 0);
    assert_eq!(summary["k_median"], 0.0);
    assert_eq!(summary["k_max"], 0);
    let curve = std::fs::read_to_string(eval_out.join("drop_curve.csv")).unwrap();
    let points: Vec<(f64, f64)> = curve
        .lines()
        .skip(1)
        .map(|row| {
            let (a, b) = row.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(points.len(), 9);
    assert_eq!(points[0].1, summary["accuracy"].as_f64().unwrap());
    // trapezoidal recomputation of the reported AUC
    let span = points.last().unwrap().0 - points[0].0;
    let area: f64 = points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) / 2.0)
        .sum();
    assert!((area / span - summary["auc"].as_f64().unwrap()).abs() < 1e-9);

    // diagnose: one profile row per sample, aggregate matches the rows
    let diag_out = dir.path().join("diag");
    run_ok(bin().args([
        "diagnose",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--step",
        "0.1",
        "--out",
        diag_out.to_str().unwrap(),
    ]));
    let profiles = std::fs::read_to_string(diag_out.join("profiles.csv")).unwrap();
    let rows: Vec<&str> = profiles.lines().skip(1).collect();
    assert_eq!(rows.len(), 24);
    let class_two = rows.iter().filter(|r| r.ends_with(",II")).count();
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(diag_out.join("diagnose_summary.json")).unwrap(),
    )
    .unwrap();
    let pct = summary["class_two_percent"].as_f64().unwrap();
    assert!((pct - 100.0 * class_two as f64 / 24.0).abs() < 1e-9);

    // export: valid 16-bit P5 files, re-export byte-identical
    let sal_out = dir.path().join("sal");
    let export = |out: &Path| {
        run_ok(bin().args([
            "export-saliency",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--ids",
            "0,3",
            "--out",
            out.to_str().unwrap(),
        ]));
    };
    export(&sal_out);
    for id in [0, 3] {
        let path = sal_out.join(format!("{id}_traditional.pgm"));
        let (h, w, samples) = smoot::saliency::read_pgm16(&path).unwrap();
        assert_eq!((h, w), (28, 28));
        assert_eq!(samples.len(), 784);
    }
    let sal_out2 = dir.path().join("sal2");
    export(&sal_out2);
    assert_eq!(
        std::fs::read(sal_out.join("0_traditional.pgm")).unwrap(),
        std::fs::read(sal_out2.join("0_traditional.pgm")).unwrap()
    );

    // bad sample id → config-class exit
    let out = bin()
        .args([
            "export-saliency",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--ids",
            "9999",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
