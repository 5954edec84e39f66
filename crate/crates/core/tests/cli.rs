use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn promptlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

const CONFIG: &str = r#"{
  "dataset": {"source": "dir", "path": "data"},
  "backbone": {"hidden": 8, "layers": 3, "heads": 2, "ffn_dim": 16},
  "method": {"kind": "id-spam", "prompt_len": 2},
  "train": {"epochs": 2, "batch_size": 8, "peak_lr": 0.005},
  "seeds": [1, 2],
  "sweep": {"methods": ["id-spam", "prompt-tuning"]},
  "transfer": {
    "target": {"source": "synthetic", "kind": "vocab_shifted", "seed": 7, "train": 24, "dev": 8, "test": 8, "overlap": 1.0},
    "mode": "zero_shot"
  },
  "cost": {"hidden": [8], "layers": [2], "methods": ["id-spam", "lora"], "workload": 2}
}"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = promptlab(
        &[
            "make-data",
            "--kind",
            "keyword",
            "--seed",
            "7",
            "--train",
            "24",
            "--dev",
            "8",
            "--test",
            "8",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

#[test]
fn gradcheck_passes_and_prints_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptlab(
        &["gradcheck", "--method", "id-spam", "--n", "8", "--t", "2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap();
    let err: f64 = last
        .trim_start_matches("max relative error: ")
        .parse()
        .unwrap();
    assert!(err < 1e-4);
    let strict = promptlab(
        &["gradcheck", "--method", "id-spam", "--tol", "1e-300"],
        dir.path(),
    );
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        CONFIG.replace("\"data\"", "\"no/such/dir\""),
    )
    .unwrap();
    let out = promptlab(&["train", "--config", "cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("no/such/dir"), "{}", text(&out));
    let out = promptlab(&["train", "--config", "absent.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("absent.json"));
}

#[test]
fn usage_errors_exit_2_and_help_lists_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(promptlab(&["launch"], dir.path()).status.code(), Some(2));
    assert_eq!(
        promptlab(&["train", "--nope"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(promptlab(&[], dir.path()).status.code(), Some(2));
    let help = promptlab(&["train", "--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    let help = text(&help);
    for flag in ["--config", "--seed", "--layer", "--method", "--out"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let top = text(&promptlab(&["--help"], dir.path()));
    for cmd in [
        "train",
        "eval",
        "sweep",
        "transfer",
        "cost",
        "gradcheck",
        "make-data",
    ] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn runtime_errors_exit_nonzero() {
    let dir = workspace();
    let out = promptlab(
        &["train", "--config", "cfg.json", "--layer", "9"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("layer"));
    let out = promptlab(
        &["sweep", "--config", "cfg.json", "--method", "lora"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_writes_reports_under_out() {
    let dir = workspace();
    let out = promptlab(
        &[
            "train", "--config", "cfg.json", "--seed", "3", "--out", "runs",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let run = dir.path().join("runs/train/id-spam-seed3");
    for file in ["checkpoint.json", "curve.csv", "summary.json"] {
        assert!(run.join(file).is_file(), "{file}");
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    let report = fs::read_to_string(dir.path().join("runs/train.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    let out = promptlab(
        &[
            "eval",
            "--config",
            "cfg.json",
            "--checkpoint",
            "runs/train/id-spam-seed3/checkpoint.json",
            "--out",
            "runs",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("runs/eval.json").is_file());
}

#[test]
fn sweep_csv_has_one_row_per_method_and_layer() {
    let dir = workspace();
    let out = promptlab(&["sweep", "--config", "cfg.json", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("o/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(lines[0].starts_with("experiment,method,layer,config_hash"));
    assert_eq!(lines.len(), 1 + 3 * 2);
    let out = promptlab(
        &[
            "sweep", "--config", "cfg.json", "--out", "o2", "--layer", "1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("o2/sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2);
}

#[test]
fn transfer_and_cost_commands() {
    let dir = workspace();
    let out = promptlab(
        &[
            "transfer", "--config", "cfg.json", "--out", "o", "--seed", "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/transfer.json")).unwrap())
            .unwrap();
    let stats = &json["runs"][0]["transfer"];
    assert_eq!(stats["target_optimizer_steps"], 0);
    assert_eq!(stats["target_metric"], stats["source_dev_metric"]);
    let out = promptlab(&["cost", "--config", "cfg.json", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("o/cost.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 2);
}
