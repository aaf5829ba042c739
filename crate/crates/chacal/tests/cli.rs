//! End-to-end checks of the `chacal` binary: exit codes, experiment output
//! files, dataset generation.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chacal"))
}

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("chacal_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn assert_experiment_outputs(dir: &Path) {
    for file in ["config.json", "runs.csv", "summary.json"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    let command = config["command_line"].as_str().unwrap();
    assert!(command.contains("chacal"), "reproduction command missing: {command}");
}

#[test]
fn theorem_check_passes_and_writes_outputs() {
    let dir = temp_dir("theorem");
    let output = bin()
        .args(["theorem-check", "--max-depth", "128", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("PASS"));
    assert_experiment_outputs(&dir);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn gen_data_writes_dataset_and_vocab() {
    let dir = temp_dir("gendata");
    let output = bin()
        .args(["gen-data", "--task", "boxes-advanced", "--count", "25", "--seed", "3", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(dir.join("boxes.jsonl").exists());
    assert!(dir.join("vocab.txt").exists());
    let lines = std::fs::read_to_string(dir.join("boxes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 25);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_flags_and_commands_fail_cleanly() {
    let output = bin().args(["theorem-check", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn sweep_gamma_accepts_a_custom_config() {
    // miniature two-point sweep: pipeline check, not a performance claim
    let dir = temp_dir("gamma");
    std::fs::create_dir_all(&dir).unwrap();
    let config = serde_json::json!({
        "toy": { "n": 16, "k": 8, "seed": 11 },
        "dims": { "d_model": 16, "n_heads": 2, "d_inner": 32, "gamma": 0.9 },
        "gammas": [0.0, 0.9],
        "train": {
            "learning_rate": 3e-3,
            "batch_size": 8,
            "beta1": 0.9,
            "beta2": 0.98,
            "eps": 1e-8,
            "weight_decay": 0.0,
            "total_steps": 40,
            "warmup_steps": 10,
            "eval_interval": 20,
            "eval_samples": 8,
            "exact_match_samples": 0,
            "seed": 0,
            "grad_clip": 1.0,
            "stop_at_accuracy": null
        },
        "repeats": 1,
        "out_dir": null,
        "assert_shape": false
    });
    let config_path = dir.join("spec.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let output = bin()
        .args(["sweep-gamma", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    assert_experiment_outputs(&dir);
    let csv = std::fs::read_to_string(dir.join("runs.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "expected header + two rows: {csv}");
    let _ = std::fs::remove_dir_all(&dir);
}
