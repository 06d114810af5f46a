use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn divebatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divebatch")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_then_train_on_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("data.csv");
    let out = divebatch(&["gen-data", "--n", "400", "--d", "5", "--seed", "3", "--out", s(&csv)]);
    assert!(out.status.success());
    assert!(tmp.path().join("data.csv.split").is_file());

    let cfg = tmp.path().join("csv.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\nsource = \"csv\"\npath = {:?}\nuse_split_file = true\n\
             [train]\nlr = 1.0\nbatch = 16\nmax_batch = 320\nepochs = 5\n",
            s(&csv)
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = divebatch(&["train", "--config", s(&cfg), "--out", s(&run), "--mask-time"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(run.join("trial_1.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(run.join("model_trial_1.ckpt").is_file());
    assert!(run.join("summary.csv").is_file());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("typo.toml");
    fs::write(&cfg, "[train]\nlrr = 1.0\n").unwrap();
    let out = divebatch(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lrr"));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(divebatch(&["train", "--config", s(&missing)]).status.code(), Some(2));
    assert_eq!(divebatch(&["train", "--preset", "cifar10"]).status.code(), Some(2));
    assert_eq!(divebatch(&["train", "--preset", "no-such"]).status.code(), Some(2));
    assert_eq!(divebatch(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("huge.toml");
    fs::write(
        &cfg,
        "[data]\nn = 500\nd = 50\n[model]\nfamily = \"mlp\"\n\
         [train]\nlr = 1e308\nbatch = 16\nmax_batch = 400\nepochs = 3\n",
    )
    .unwrap();
    let out = divebatch(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn presets_are_listed() {
    let out = divebatch(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["synthetic-convex", "synthetic-nonconvex-sgd512", "tiny-imagenet"] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
    let shown = divebatch(&["presets", "--show", "synthetic-convex"]);
    assert!(String::from_utf8(shown.stdout).unwrap().contains("max_batch"));
}

#[test]
fn diagnose_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("diag.txt");
    let out = divebatch(&["diagnose", "--suite", "bounds", "--out", s(&report)]);
    assert!(out.status.success());
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().any(|l| l == "passed=true"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("bounds.")));
}
