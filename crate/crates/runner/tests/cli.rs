//! End-to-end checks of the `pnpslab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn pnpslab(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pnpslab"));
    cmd.args(args).env_remove("PNPSLAB_OUT").env("RUST_LOG", "warn");
    if let Some(dir) = out_env {
        cmd.env("PNPSLAB_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL: &str = r#"{
  "seeds": [3],
  "model": {"embed_dim": 4, "hidden_dim": 4, "mlp_hidden": 4},
  "train": {"epochs": 1, "eval_train": false},
  "data": {"n_train": 200, "n_dev": 50, "n_probe": 1200, "n_eval": 2400}
}"#;

#[test]
fn unknown_config_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seeds": [0], "learning_rat": 0.1}"#);
    let out = pnpslab(&["--config", &cfg, "--out", tmp.path().to_str().unwrap(), "pnps"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_value_and_bad_flag_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"pnps": {"strength": 1.5}}"#);
    let out = pnpslab(&["--config", &cfg, "pnps"], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
    let out = pnpslab(&["pnps", "--threads", "many"], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_experiment_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"experiment": "bias_sweep"}"#);
    let out = pnpslab(&["--config", &cfg, "inlp"], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_out_dir_wins_and_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let env_dir = tmp.path().join("from_env");
    let flag_dir = tmp.path().join("from_flag");
    let flag = flag_dir.to_str().unwrap();

    let out = pnpslab(&["--config", &cfg, "--out", flag, "generate", "--task", "A"], Some(&env_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.join("run_record.json").exists());
    assert!(env_dir.join("data/A_train.jsonl").exists());
    assert!(!flag_dir.exists());

    let train_data = env_dir.join("data/A_train.jsonl");
    let model_dir = tmp.path().join("model");
    let out = pnpslab(
        &["--config", &cfg, "--out", model_dir.to_str().unwrap(), "train", "--task", "A", "--train-data", train_data.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(model_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,group,n,loss,accuracy,method,seed"));

    let probe_dir = tmp.path().join("probe");
    let test_data = env_dir.join("data/A_test.jsonl");
    let out = pnpslab(
        &[
            "--config",
            &cfg,
            "--out",
            probe_dir.to_str().unwrap(),
            "probe",
            "--model",
            model_dir.join("model.ckpt").to_str().unwrap(),
            "--data",
            test_data.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mdl = std::fs::read_to_string(probe_dir.join("mdl.csv")).unwrap();
    assert!(mdl.starts_with("block_end,block_codelength_bits,cumulative_bits,compression"));
}

#[test]
fn identical_config_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"pnps": {"mc_samples": 2000}}"#);
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = pnpslab(&["--config", &cfg, "pnps"], Some(&dir));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.join("pnps.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
