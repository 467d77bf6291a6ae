use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cardiseg(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cardiseg"));
    cmd.args(args).env_remove("CARDISEG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn kappa_from_the_confusion_fixture() {
    let out = cardiseg(&["stats", "kappa", "--confusion", &fixture("grade_confusion.csv")], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let kappa = v["weighted_kappa"].as_f64().unwrap();
    assert!((kappa - 0.5875).abs() < 1e-4, "{kappa}");
    assert_eq!(v["joint_leq3_count"], 214);
}

#[test]
fn tost_and_bland_altman_read_pair_files() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    let mut text = String::from("case_id,a,b\n");
    for i in 0..10 {
        let d = if i % 2 == 0 { 2.0 } else { -2.0 };
        text += &format!("p{i},{},{}\n", 40.0 + d, 40.0);
    }
    fs::write(&pairs, text).unwrap();
    let p = pairs.display().to_string();
    let out = cardiseg(&["stats", "tost", "--pairs", &p, "--margin", "15"], &[]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["equivalent"], true);
    let out = cardiseg(&["stats", "bland-altman", "--pairs", &p], &[]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["bland_altman"]["bias"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(cardiseg(&["stats", "kappa", "--bogus"], &[]).status.code(), Some(2));
    let missing = cardiseg(&["eval", "--auto", "/nonexistent/a.vol", "--ref", "/nonexistent/b.vol"], &[]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"training": {"iterations": 10}}"#).unwrap();
    let out = dir.path().join("exp").display().to_string();
    let pinned = cardiseg(&["crossval", "--out", &out, "--config", &cfg.display().to_string()], &[]);
    assert_eq!(pinned.status.code(), Some(2), "{}", String::from_utf8_lossy(&pinned.stderr));

    let bad_seed = cardiseg(&["crossval", "--out", &out], &[("CARDISEG_SEED", "seven")]);
    assert_eq!(bad_seed.status.code(), Some(2));
}

#[test]
fn environment_seed_fixes_phantom_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("phantom.json");
    fs::write(&cfg, r#"{"shape": [32, 32, 32], "spacing_mm": [3.0, 3.0, 3.0]}"#).unwrap();
    let cfg = cfg.display().to_string();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = cardiseg(
            &["phantom", "--out", &out.display().to_string(), "--count", "1", "--config", &cfg],
            &[("CARDISEG_SEED", seed)],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "vol"))
            .map(|p| fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn eval_and_grade_on_generated_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("phantom.json");
    fs::write(&cfg, r#"{"shape": [32, 32, 32], "spacing_mm": [3.0, 3.0, 3.0]}"#).unwrap();
    let out = dir.path().join("cohort");
    let o = cardiseg(
        &["phantom", "--out", &out.display().to_string(), "--count", "1", "--seed", "3", "--config", &cfg.display().to_string()],
        &[],
    );
    assert!(o.status.success());
    let labels: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().ends_with("labels_ccta.vol"))
        .collect();
    assert_eq!(labels.len(), 1);
    let l = labels[0].display().to_string();
    let eval = cardiseg(&["eval", "--auto", &l, "--ref", &l], &[]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(v["mean_dsc"].as_f64(), Some(1.0));
    let grade = cardiseg(&["grade", "--auto", &l, "--ref", &l], &[]);
    let v: serde_json::Value = serde_json::from_slice(&grade.stdout).unwrap();
    assert_eq!(v["grade"], 1);
}
