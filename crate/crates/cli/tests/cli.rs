use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cofusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cofusion"))
        .args(args)
        .env_remove("COFUSION_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cofusion(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(root: &Path, rel: &str) -> String {
    root.join(rel).to_string_lossy().into_owned()
}

fn best_val_f1(history: &str) -> f64 {
    history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max)
}

fn macro_f1(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("macro_f1 "))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn help_lists_training_defaults() {
    let help = ok(&["train", "--help"]);
    for needle in [
        "--lr <LR>",
        "[default: 0.00002]",
        "[default: 0.01]",
        "[default: 4]",
        "[default: 2]",
        "[default: 0.1]",
        "[default: 5]",
        "[default: 1]",
        "[default: 42]",
        "[default: 0.5]",
        "[env: COFUSION_LR=]",
    ] {
        assert!(help.contains(needle), "missing {needle}:\n{help}");
    }
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(cofusion(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cofusion(&["gradcheck", "--dim", "7", "--heads", "2"]).status.code(), Some(1));

    let out = cofusion(&["gradcheck", "--strategy", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("{early, late, clip_style, cross_t2i, cross_i2t, mcfm}"), "{err}");

    fs::write(root.join("empty.jsonl"), "").unwrap();
    let out = cofusion(&["eval", "--checkpoint", &p(root, "missing.txt"), "--manifest", &p(root, "empty.jsonl"), "--out", &p(root, "e")]);
    assert_eq!(out.status.code(), Some(2));

    let out = cofusion(&["gradcheck", "--strategy", "late", "--corrupt", "late.text.weight"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_passes_every_strategy() {
    let out = ok(&["gradcheck"]);
    assert_eq!(out.matches("PASS").count(), 6, "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.contains("coatt0.t2v"));
}

#[test]
fn synth_is_reproducible_and_summarised() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for run in ["a", "b"] {
        ok(&["synth", "--out", &p(root, run), "--samples-per-class", "30", "--joint-signal", "1.0", "--label-noise", "0"]);
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "summary.txt"] {
        assert_eq!(fs::read(root.join("a").join(f)).unwrap(), fs::read(root.join("b").join(f)).unwrap());
    }
    let summary = fs::read_to_string(root.join("a/summary.txt")).unwrap();
    assert!(summary.contains("joint_signal 1\n"), "{summary}");
    assert!(summary.contains("kinds joint 90 noise 0 class 0"), "{summary}");
    assert!(summary.contains("train 21 21 21"), "{summary}");
    assert_eq!(fs::read_to_string(root.join("a/val.jsonl")).unwrap().lines().count(), 15);
}

#[test]
fn env_overrides_flag_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_cofusion"))
        .args(["synth", "--out", &p(root, "d")])
        .env("COFUSION_SAMPLES_PER_CLASS", "5,6,7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_to_string(root.join("d/summary.txt")).unwrap().contains("samples_per_class [5, 6, 7]"));
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir(root.join("d")).unwrap();
    fs::write(root.join("d/.cofusion.lock"), "1").unwrap();
    let out = cofusion(&["synth", "--out", &p(root, "d"), "--samples-per-class", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert!(!root.join("d/train.jsonl").exists());
}

#[test]
fn mcfm_learns_joint_signal_and_beats_late_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["synth", "--out", &p(root, "data"), "--seed", "3"]);
    let train = |strategy: &str| {
        ok(&[
            "train", "--train", &p(root, "data/train.jsonl"), "--val", &p(root, "data/val.jsonl"),
            "--out", &p(root, strategy), "--strategy", strategy, "--dim", "32", "--heads", "4",
            "--mlp-hidden", "32", "--lr", "2e-3", "--max-epochs", "40", "--seed", "3", "--quiet",
        ]);
        fs::read_to_string(root.join(strategy).join("history.csv")).unwrap()
    };
    let mcfm = best_val_f1(&train("mcfm"));
    let late = best_val_f1(&train("late"));
    assert!(mcfm > 0.9, "mcfm best val macro F1 {mcfm}");
    assert!(late < mcfm, "late {late} vs mcfm {mcfm}");

    let eval = |manifest: &str, out: &str| {
        ok(&["eval", "--checkpoint", &p(root, "mcfm/checkpoint.txt"), "--manifest", &p(root, manifest), "--out", &p(root, out)]);
        fs::read_to_string(root.join(out).join("report.txt")).unwrap()
    };
    let on_train = eval("data/train.jsonl", "eval_train");
    let on_test = eval("data/test.jsonl", "eval_test");
    assert!(macro_f1(&on_train) > macro_f1(&on_test));
    assert_eq!(eval("data/test.jsonl", "eval_again"), on_test);

    let table = ok(&["report", "--out", &p(root, "report"), &p(root, "eval_test")]);
    assert!(table.starts_with("run,strategy,accuracy,macro_f1"));
    assert!(root.join("report/heatmap_eval_test.csv").exists());
}

#[test]
fn eval_rejects_mismatched_feature_dims() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["synth", "--out", &p(root, "a"), "--samples-per-class", "10"]);
    ok(&["synth", "--out", &p(root, "b"), "--samples-per-class", "10", "--text-dim", "12"]);
    ok(&[
        "train", "--train", &p(root, "a/train.jsonl"), "--val", &p(root, "a/val.jsonl"), "--out", &p(root, "m"),
        "--dim", "8", "--heads", "2", "--max-epochs", "1", "--quiet",
    ]);
    let out = cofusion(&["eval", "--checkpoint", &p(root, "m/checkpoint.txt"), "--manifest", &p(root, "b/test.jsonl"), "--out", &p(root, "e")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("syn-"));
}
