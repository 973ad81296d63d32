use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfda2(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfda2"))
        .args(args)
        .current_dir(dir)
        .env_remove("SFDA2_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const FAST: &str = r#"{"pretrain": {"epochs": 3}, "adapt": {"epochs": 1}}"#;

/// gen-data, pretrain and adapt into `out`, returning nothing; files are read
/// by the caller.
fn pipeline(dir: &Path, out: &str, config: &str) {
    fs::write(dir.join("run.json"), config).unwrap();
    ok(&sfda2(&["gen-data", "--seed", "4", "--out", &format!("{out}/data")], dir));
    ok(&sfda2(
        &["pretrain", "--config", "run.json", "--source", &format!("{out}/data/source.csv"), "--out", &format!("{out}/src")],
        dir,
    ));
    ok(&sfda2(
        &[
            "adapt", "--config", "run.json",
            "--model", &format!("{out}/src/source.ckpt"),
            "--target", &format!("{out}/data/target.csv"),
            "--out", &format!("{out}/adapted"),
        ],
        dir,
    ));
}

#[test]
fn gen_data_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        r#"{"source_counts": [30, 20, 10], "target_counts": [5, 6, 7]}"#,
    )
    .unwrap();
    ok(&sfda2(&["gen-data", "--spec", "spec.json", "--seed", "1", "--out", "data"], dir.path()));
    let lines = |f: &str| fs::read_to_string(dir.path().join("data").join(f)).unwrap().lines().count() - 1;
    assert_eq!(lines("source.csv"), 60);
    assert_eq!(lines("target.csv"), 18);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", FAST);
    pipeline(dir.path(), "b", FAST);
    for f in ["data/source.csv", "data/target.csv", "src/source.ckpt", "src/metrics.json", "adapted/adapted.ckpt", "adapted/metrics.json", "adapted/losses.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn snc_only_config_zeroes_ifa_and_fd() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(
        dir.path(),
        "o",
        r#"{"pretrain": {"epochs": 3}, "adapt": {"epochs": 1, "alpha1": 0, "alpha2": 0}}"#,
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/adapted/metrics.json")).unwrap()).unwrap();
    let iters = m["iterations"].as_array().unwrap();
    assert!(!iters.is_empty());
    assert!(iters.iter().all(|i| i["ifa"] == 0.0 && i["fd"] == 0.0));
    let csv = fs::read_to_string(dir.path().join("o/adapted/losses.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "iteration,snc,ifa,fd,total,decay,lambda");
    assert_eq!(csv.lines().count(), iters.len() + 1);
}

#[test]
fn target_labels_do_not_affect_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "p", FAST);
    // same rows, every label rotated to another class
    let target = fs::read_to_string(dir.path().join("p/data/target.csv")).unwrap();
    let mut relabeled = String::new();
    for (i, line) in target.lines().enumerate() {
        if i == 0 {
            relabeled.push_str(line);
        } else {
            let (head, label) = line.rsplit_once(',').unwrap();
            let y: usize = label.parse().unwrap();
            relabeled.push_str(&format!("{head},{}", (y + 1) % 3));
        }
        relabeled.push('\n');
    }
    fs::write(dir.path().join("relabeled.csv"), relabeled).unwrap();
    ok(&sfda2(
        &["adapt", "--config", "run.json", "--model", "p/src/source.ckpt", "--target", "relabeled.csv", "--out", "q"],
        dir.path(),
    ));
    let a = fs::read(dir.path().join("p/adapted/adapted.ckpt")).unwrap();
    let b = fs::read(dir.path().join("q/adapted.ckpt")).unwrap();
    assert!(a == b);
}

#[test]
fn eval_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "e", FAST);
    ok(&sfda2(&["eval", "--model", "e/src/source.ckpt", "--data", "e/data/source.csv", "--out", "ev"], dir.path()));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["samples"], 600);
    for k in ["accuracy", "per_class_mean", "harmonic_mean", "macro_f1"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
}

#[test]
fn verify_exit_codes_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = sfda2(
        &["verify", "--suite", "ifa-bound", "--trials", "4", "--pairs", "10000", "--seed", "7", "--out", "v"],
        dir.path(),
    );
    ok(&out);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/report.json")).unwrap()).unwrap();
    assert_eq!(r["suite"], "ifa-bound");
    assert_eq!(r["trials"], 4);
    assert_eq!(r["passed"], true);
    assert!(r["failures"].as_array().unwrap().is_empty());

    let out = sfda2(
        &["verify", "--suite", "snc-factorization", "--negative-control", "--seed", "1", "--out", "c"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c/report.json")).unwrap()).unwrap();
    assert_eq!(r["passed"], false);
    assert!(r["failures"][0]["instance"]["neighbors"].is_array());
}

#[test]
fn usage_and_validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sfda2(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(sfda2(&["verify", "--suite", "nope", "--out", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(sfda2(&["gen-data"], dir.path()).status.code(), Some(1));
    assert_eq!(sfda2(&["--help"], dir.path()).status.code(), Some(0));

    fs::write(dir.path().join("bad.json"), r#"{"adapt": {"alpah1": 0}}"#).unwrap();
    fs::write(dir.path().join("s.csv"), "f0,label\n0.5,0\n-0.5,1\n").unwrap();
    let out = sfda2(&["pretrain", "--config", "bad.json", "--source", "s.csv", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah1"));

    fs::write(dir.path().join("neg.json"), r#"{"pretrain": {"lr": -1}}"#).unwrap();
    let out = sfda2(&["pretrain", "--config", "neg.json", "--source", "s.csv", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let out = sfda2(&["eval", "--model", "missing.ckpt", "--data", "s.csv", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_env_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_sfda2"));
        c.args(args).current_dir(dir.path()).env_remove("SFDA2_SEED");
        if let Some(v) = env {
            c.env("SFDA2_SEED", v);
        }
        let out = c.output().unwrap();
        assert!(out.status.success());
    };
    run(&["gen-data", "--out", "env5"], Some("5"));
    run(&["gen-data", "--seed", "5", "--out", "flag5"], None);
    run(&["gen-data", "--seed", "6", "--out", "flag6"], Some("5"));
    run(&["gen-data", "--out", "none"], None);
    run(&["gen-data", "--seed", "0", "--out", "zero"], None);
    let read = |d: &str| fs::read(dir.path().join(d).join("target.csv")).unwrap();
    assert!(read("env5") == read("flag5"));
    assert!(read("flag6") != read("flag5"));
    assert!(read("none") == read("zero"));
}
