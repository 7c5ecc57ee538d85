use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qrm_core::distribution::MixtureWeights;
use qrm_core::gating::GatingParams;
use qrm_core::quantile_regression::AttributeExample;

fn qrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = qrm(args);
    assert!(
        out.status.success(),
        "qrm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_pipeline(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&[
        "gen-data",
        "--out",
        d,
        "--seed",
        "3",
        "--n-per-attribute",
        "400",
        "--n-holdout",
        "300",
        "--n-preferences",
        "600",
        "--n-holdout-preferences",
        "200",
    ]);
    ok(&[
        "train-quantiles",
        "--out",
        d,
        "--seed",
        "3",
        "--max-iterations",
        "300",
    ]);
    ok(&[
        "train-gating",
        "--out",
        d,
        "--seed",
        "3",
        "--batch-size",
        "64",
    ]);
}

#[test]
fn help_lists_every_flag() {
    let common = ["--config", "--seed", "--out", "--verbose"];
    let cases: &[(&str, &[&str])] = &[
        (
            "gen-data",
            &[
                "--preset",
                "--spec",
                "--n-per-attribute",
                "--n-holdout",
                "--n-preferences",
                "--n-holdout-preferences",
                "--n-probes",
                "--g-star",
                "--bt-noise",
                "--target-bayes-accuracy",
            ],
        ),
        (
            "train-quantiles",
            &[
                "--data",
                "--num-levels",
                "--l1-strength",
                "--learning-rate",
                "--max-iterations",
                "--convergence-tolerance",
                "--patience",
                "--max-rows-per-attribute",
                "--penalty-attribute",
            ],
        ),
        (
            "train-gating",
            &[
                "--models",
                "--prefs",
                "--epochs",
                "--learning-rate",
                "--batch-size",
                "--weight-decay",
                "--hidden-dim",
            ],
        ),
        (
            "score",
            &["--models", "--gating", "--input", "--lambda", "--tail-tau"],
        ),
        (
            "rlhf",
            &[
                "--models",
                "--gating",
                "--env",
                "--preset",
                "--num-prompts",
                "--mode",
                "--k",
                "--beta",
                "--lambda",
                "--learning-rate",
                "--batch-size",
                "--steps",
                "--trace-every",
            ],
        ),
        (
            "eval",
            &[
                "--models",
                "--gating",
                "--holdout",
                "--prefs",
                "--ground-truth",
                "--baseline",
                "--min-pairwise-accuracy",
                "--max-coverage-deviation",
                "--require-bimodal-capture",
                "--bimodal-tolerance",
                "--bimodal-probes",
            ],
        ),
    ];
    for (sub, flags) in cases {
        let out = qrm(&[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for f in common.iter().chain(flags.iter()) {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn constant_targets_score_constant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rows: Vec<AttributeExample> = (0..200)
        .flat_map(|i| {
            let x = vec![i as f64 * 0.01, (i % 7) as f64, -1.0 + (i % 3) as f64];
            (0..2).map(move |a| AttributeExample {
                features: x.clone(),
                attribute: a,
                score: 0.4,
            })
        })
        .collect();
    qrm_core::io::write_jsonl(&d.join("attributes.jsonl"), &rows).unwrap();
    let gating =
        GatingParams::constant(1, 4, &MixtureWeights::new(vec![0.3, 0.7]).unwrap()).unwrap();
    qrm_core::io::write_json(&d.join("gating.json"), &gating).unwrap();
    fs::write(
        d.join("probes.jsonl"),
        "{\"prompt_features\":[0.5],\"response_features\":[3.0,-2.0,9.0]}\n{\"prompt_features\":[-4.0],\"response_features\":[0.0,0.0,0.0]}\n",
    )
    .unwrap();
    let ds = d.to_str().unwrap();
    ok(&["train-quantiles", "--out", ds]);
    ok(&["score", "--out", ds, "--lambda", "2"]);
    let text = fs::read_to_string(d.join("scores.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for q in v["quantiles"].as_array().unwrap() {
            assert!((q.as_f64().unwrap() - 0.4).abs() < 1e-6);
        }
        assert!((v["expectation"].as_f64().unwrap() - 0.4).abs() < 1e-6);
        assert!((v["utility"].as_f64().unwrap() + (-0.8f64).exp()).abs() < 1e-6);
    }
}

#[test]
fn eval_threshold_failure_still_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let d = dir.path().to_str().unwrap();
    let out = qrm(&["eval", "--out", d, "--min-pairwise-accuracy", "1.01"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "threshold");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    let acc = report["pairwise_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(dir.path().join("coverage.csv").is_file());

    let pass = qrm(&[
        "eval",
        "--out",
        d,
        "--min-pairwise-accuracy",
        "0.0",
        "--max-coverage-deviation",
        "1.0",
    ]);
    assert_eq!(pass.status.code(), Some(0));
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let d = dir.path().to_str().unwrap();
    let names = [
        "attributes.jsonl",
        "preferences.jsonl",
        "quantile_models.json",
        "gating.json",
        "probes.jsonl",
    ];
    let before: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(dir.path().join(n)).unwrap())
        .collect();
    ok(&["score", "--out", d]);
    ok(&["rlhf", "--out", d, "--steps", "50"]);
    ok(&["eval", "--out", d]);
    let after: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(dir.path().join(n)).unwrap())
        .collect();
    assert_eq!(before, after);
    for f in [
        "scores.jsonl",
        "environment.json",
        "policy_risk_neutral.json",
        "trace_risk_aware.csv",
        "comparison.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\nout = {:?}\n\n[gen_data]\npreset = \"bimodal\"\nn_per_attribute = 40\nn_holdout = 10\nn_preferences = 10\nn_holdout_preferences = 10\nn_probes = 3\nbt_noise = 0.0\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--n-per-attribute",
        "25",
    ]);
    let rows = fs::read_to_string(out.join("attributes.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 25);
    let truth: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["bt_noise"], 0.0);
    assert_eq!(truth["spec"]["attributes"][0]["name"], "conflict");
}

#[test]
fn bad_inputs_fail_with_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["score".into(), "--out".into(), d.into()],
        vec![
            "gen-data".into(),
            "--out".into(),
            d.into(),
            "--preset".into(),
            "nope".into(),
        ],
        vec![
            "gen-data".into(),
            "--out".into(),
            d.into(),
            "--g-star".into(),
            "0.5,0.6,0.1".into(),
        ],
        vec![
            "train-quantiles".into(),
            "--data".into(),
            format!("{d}/missing.jsonl"),
        ],
        vec!["eval".into(), "--unknown-flag".into()],
    ];
    for args in &cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = qrm(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| {
            panic!(
                "stderr is not JSON: {}",
                String::from_utf8_lossy(&out.stderr)
            )
        });
        assert!(err["error"].is_string() && err["message"].is_string());
    }

    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[gen_data]\nn_per_atribute = 3\n").unwrap();
    let out = qrm(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}
