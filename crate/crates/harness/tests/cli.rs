use std::path::Path;
use std::process::{Command, Output};

fn octaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octaseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--base-channels",
    "4",
    "--ssm-state-dim",
    "2",
    "--roi-size",
    "32",
    "--epochs",
    "4",
    "--warmup-epochs",
    "1",
    "--no-augment",
];

fn synth(dir: &Path) {
    let out = octaseg(&["synth", "--out-dir", s(dir), "--train", "2", "--val", "2", "--test", "1", "--size", "48"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Mean of one column over the per-sample rows of a metrics CSV.
fn column_mean(csv: &str, col: usize) -> f64 {
    let rows: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean"))
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);

    let mut args = vec!["train", "--data", s(&data), "--out-dir", s(&run)];
    args.extend_from_slice(TINY);
    let out = octaseg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["run_log.csv", "step_log.csv", "val_metrics.csv", "checkpoints.csv", "checkpoints/last.safetensors"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // Re-scoring the best-RV checkpoint on the validation split reproduces
    // the score it was selected with.
    let ckpts = std::fs::read_to_string(run.join("checkpoints.csv")).unwrap();
    let best_rv = ckpts.lines().find(|l| l.starts_with("best_rv")).unwrap();
    let fields: Vec<&str> = best_rv.split(',').collect();
    let recorded: f64 = fields[2].parse().unwrap();
    let ckpt = fields[4];
    let eval_dir = tmp.path().join("eval");
    let out = octaseg(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        ckpt,
        "--split",
        "val",
        "--out-dir",
        s(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(eval_dir.join("metrics_val.csv")).unwrap();
    assert!((column_mean(&metrics, 1) - recorded).abs() < 1e-5, "{metrics} vs {recorded}");

    let pred = tmp.path().join("pred");
    let last = run.join("checkpoints/last.safetensors");
    let out = octaseg(&[
        "predict",
        "--data",
        s(&data),
        "--checkpoint",
        s(&last),
        "--tta",
        "--gates",
        "--out-dir",
        s(&pred),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["overlay", "rv", "faz", "gate_spatial", "gate_structural"] {
        assert!(pred.join(format!("synth_004_{f}.png")).exists(), "{f}");
    }
    assert!(pred.join("synth_004_gates.txt").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");

    let out = octaseg(&["train", "--data", s(&data), "--out-dir", s(&run), "--epochs", "5", "--warmup-epochs", "5"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = \"many\"\n").unwrap();
    let out = octaseg(&["train", "--data", s(&data), "--out-dir", s(&run), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    // A ROI larger than the 48-pixel images.
    let out = octaseg(&["train", "--data", s(&data), "--out-dir", s(&run), "--roi-size", "64", "--base-channels", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_3_and_dumps_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out-dir", s(&run), "--lr-max", "1e30", "--lr-init", "1e30"];
    args.extend_from_slice(TINY);
    let out = octaseg(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = std::fs::read_to_string(run.join("nonfinite_batch.txt")).unwrap();
    assert!(dump.contains("synth_00"));
}

#[test]
fn params_reports_a_total() {
    let out = octaseg(&["params", "--base-channels", "8"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.to_lowercase().contains("total"), "{text}");
}
