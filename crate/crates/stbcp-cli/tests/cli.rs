//! End-to-end checks of the command-line surface: synthetic data flows
//! through the same CSV ingestion as real data, runs are deterministic,
//! and the error paths exit nonzero with actionable messages.

use std::path::Path;
use std::process::{Command, Output};

fn stbcp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stbcp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    name.to_string()
}

fn base_config(with_features: bool) -> serde_json::Value {
    let mut config = serde_json::json!({
        "score_path": "scores.csv",
        "rule": {"rule": "constant", "t": 2},
        "transform": "iw",
        "n": 40,
        "m": 2,
        "seed": 3,
        "output_dir": "out"
    });
    if with_features {
        config["feature_path"] = "features.csv".into();
    }
    config
}

fn generate_data(dir: &Path) {
    let out = stbcp(
        &[
            "synth",
            "--kind",
            "dirichlet",
            "--num-labels",
            "5",
            "--size",
            "200",
            "--seed",
            "21",
            "--concentration",
            "0.3",
            "--out-scores",
            "scores.csv",
            "--out-features",
            "features.csv",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn experiment_smoke_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let config = write_config(dir.path(), "cfg.json", base_config(true));

    let out = stbcp(&["experiment", "--config", &config], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["out/metrics.json", "out/trials.csv", "out/config.json"] {
        assert!(dir.path().join(artifact).exists(), "{artifact} missing");
    }
    let first = std::fs::read(dir.path().join("out/trials.csv")).unwrap();

    let out = stbcp(&["experiment", "--config", &config], dir.path());
    assert!(out.status.success());
    let second = std::fs::read(dir.path().join("out/trials.csv")).unwrap();
    assert_eq!(first, second, "re-run must be byte-identical");

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["m"], 2);
}

#[test]
fn predict_full_budget_gives_whole_label_space() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let mut config = base_config(false);
    config["rule"] = serde_json::json!({"rule": "constant", "t": 5});
    let config = write_config(dir.path(), "cfg.json", config);

    let out = stbcp(
        &["predict", "--config", &config, "--test-row", "7"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let outcome: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(outcome["set"], serde_json::json!([0, 1, 2, 3, 4]));
    let alpha = outcome["alpha_tilde"].as_f64().unwrap();
    assert!((alpha - 1.0 / 41.0).abs() < 1e-12);
}

#[test]
fn predict_sets_agree_between_identity_and_step_transform() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let config = write_config(dir.path(), "cfg.json", base_config(false));

    let identity = stbcp(
        &[
            "predict",
            "--config",
            &config,
            "--test-row",
            "3",
            "--transform",
            "identity",
        ],
        dir.path(),
    );
    let step = stbcp(
        &["predict", "--config", &config, "--test-row", "3"],
        dir.path(),
    );
    assert!(identity.status.success() && step.status.success());
    let a: serde_json::Value = serde_json::from_slice(&identity.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&step.stdout).unwrap();
    assert_eq!(a["set"], b["set"]);
}

#[test]
fn data_rule_without_features_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let mut config = base_config(false);
    config["rule"] =
        serde_json::json!({"rule": "data_feature_entropy", "t_min": 1, "t_max": 3, "p": 1.0, "k": 5});
    let config = write_config(dir.path(), "cfg.json", config);

    let out = stbcp(
        &["predict", "--config", &config, "--test-row", "0"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("feature"), "unhelpful message: {stderr}");
}

#[test]
fn verify_oracle_flag_cross_checks_every_trial() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let mut config = base_config(true);
    config["transform"] = "identity".into();
    config["m"] = 10.into();
    let config = write_config(dir.path(), "cfg.json", config);

    let out = stbcp(
        &["experiment", "--config", &config, "--verify-oracle"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("oracle agreement"), "{stdout}");

    // the step transform is not strictly increasing: the flag must refuse
    let mut config = base_config(true);
    config["m"] = 2.into();
    let config = write_config(dir.path(), "cfg2.json", config);
    let out = stbcp(
        &["experiment", "--config", &config, "--verify-oracle"],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn verify_subcommand_emits_machine_readable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = stbcp(&["verify", "--suite", "evariable", "--seed", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["suite"], "evariable");
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 4);

    let out = stbcp(&["verify", "--suite", "bogus"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn config_validation_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    generate_data(dir.path());
    let mut config = base_config(false);
    config["transform"] = "warp".into();
    let config = write_config(dir.path(), "cfg.json", config);
    let out = stbcp(
        &["predict", "--config", &config, "--test-row", "0"],
        dir.path(),
    );
    assert!(!out.status.success());

    let mut config = base_config(false);
    config["grid_step"] = 0.5.into();
    let config = write_config(dir.path(), "cfg2.json", config);
    let out = stbcp(
        &["predict", "--config", &config, "--test-row", "0"],
        dir.path(),
    );
    assert!(!out.status.success());
}
