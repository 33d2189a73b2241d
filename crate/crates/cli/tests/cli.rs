use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clinalign")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let o = run(dir.path(), &["synth-data", "--n", "100", "--seed", "7", "--out", name]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let o = run(dir.path(), &["synth-data", "--n", "100", "--seed", "8", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(a, std::fs::read(dir.path().join("c.jsonl")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--seed", "0", "--batch", "4", "--dim", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().find(|l| l.starts_with("max_rel_error")).map(str::to_owned).expect("error printed");
    let v: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!(v < 1e-4);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("usage"));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["synth-data", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["synth-data", "--out", "x.jsonl", "--set", "corpus.nope=1"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["synth-data", "--out", "x.jsonl", "--set", "corpus.normal_fraction=1.5"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["train", "--corpus", "absent.jsonl", "--out", "run"]).status.code(), Some(1));
}

#[test]
fn pipeline_runs_and_banner_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(p, &["synth-data", "--n", "240", "--seed", "3", "--out", "c.jsonl"]));
    ok(run(p, &["gen-negatives", "--corpus", "c.jsonl", "--out", "neg.jsonl"]));
    ok(run(p, &["cxr-align-gen", "--corpus", "c.jsonl", "--out", "t.jsonl", "--set", "eval.holdout=80"]));
    let train_args =
        ["train", "--corpus", "c.jsonl", "--out", "run", "--seed", "3", "--epochs", "1", "--batch", "16", "--dim", "16"];
    ok(run(p, &[&train_args[..], &["--set", "eval.holdout=80"]].concat()));
    for cmd in ["eval-zeroshot", "eval-retrieval", "eval-cxr-align", "eval-adversarial", "eval-normal-detect"] {
        let o = run(
            p,
            &[cmd, "--corpus", "c.jsonl", "--checkpoint", "run/checkpoint.json", "--triplets", "t.jsonl", "--out", "run"],
        );
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("wrote"));
    }
    let files: Vec<String> =
        std::fs::read_dir(p.join("run")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    for f in ["checkpoint.json", "metrics.jsonl", "train.config.toml", "eval_zeroshot.json", "eval_cxr_align.json"] {
        assert!(files.iter().any(|x| x == f), "{f} missing from {files:?}");
    }
    // the recorded config alone re-runs the job
    ok(run(p, &["train", "--config", "run/train.config.toml", "--out", "rerun"]));
    for f in ["checkpoint.json", "metrics.jsonl"] {
        assert_eq!(std::fs::read(p.join("run").join(f)).unwrap(), std::fs::read(p.join("rerun").join(f)).unwrap());
    }
    let bad = std::fs::read_to_string(p.join("run/checkpoint.json")).unwrap().replacen("\"data\":[", "\"data\":[9.5,", 1);
    std::fs::write(p.join("bad.json"), bad).unwrap();
    let o = run(p, &["eval-zeroshot", "--corpus", "c.jsonl", "--checkpoint", "bad.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(1));
}
