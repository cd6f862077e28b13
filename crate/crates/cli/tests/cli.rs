use std::path::Path;
use std::process::{Command, Output};

fn morphlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphlab"))
        .args(args)
        .output()
        .expect("spawn morphlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = "\
# small enough to run every stage in seconds
n_identities = 12
images_per_identity = 3
train_identities = 8
embedding_dim = 8
fr_epochs = 1
fr_batch = 16
morph_epochs = 1
morph_batch = 8
iters = 3
pairs = 3
bins = 16
";

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_succeeds() {
    let o = morphlab(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("train-morpher"));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(code(&morphlab(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&morphlab(&["train-fr", "--role", "grey", "--out", out])), 2);
    assert_eq!(code(&morphlab(&["morph", "--epochs", "3", "--out", out])), 2);
    assert_eq!(code(&morphlab(&["refine", "--iters", "0", "--out", out])), 2);
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = morphlab(&["evaluate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshold"));
    let o = morphlab(&["train-fr", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    std::fs::write(&p, "seed = 1\nwarp_factor = 9\n").unwrap();
    let o = morphlab(&[
        "gen-data",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn tiny_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for stage in [
        "gen-data",
        "train-fr",
        "calibrate",
        "train-morpher",
        "morph",
        "refine",
        "evaluate",
        "report",
    ] {
        let o = morphlab(&[stage, "--config", &cfg, "--out", out_s]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "data/manifest.txt",
        "models/fr_white.weights.json",
        "models/fr_black.weights.json",
        "calibration/white.threshold.txt",
        "models/morpher.weights.json",
        "morphs/pairs.csv",
        "morphs/morphs.csv",
        "refined/morphs.csv",
        "reports/white.report.json",
        "reports/black.report.json",
        "reports/white.svg",
        "reports/summary.csv",
        "stamps/report.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary = std::fs::read_to_string(out.join("reports/summary.csv")).unwrap();
    assert!(summary.contains("improved_approx"));
}

#[test]
fn role_flag_limits_fr_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert_eq!(code(&morphlab(&["gen-data", "--config", &cfg, "--out", out_s])), 0);
    assert_eq!(
        code(&morphlab(&[
            "train-fr", "--role", "black", "--config", &cfg, "--out", out_s
        ])),
        0
    );
    assert!(out.join("models/fr_black.weights.json").is_file());
    assert!(!out.join("models/fr_white.weights.json").exists());
}
