use std::path::Path;
use std::process::{Command, Output};

fn dsain(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsain"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "seq_len=20",
    "--set",
    "window=5",
    "--set",
    "synth.train_records=300",
    "--set",
    "synth.test_records=100",
    "--set",
    "batch_size=32",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsain(&["train", "--bogus"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn bad_override_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsain(&["bench", "--set", "no_such_key=1"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn gradcheck_is_tight() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsain(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let err: f64 = stdout(&o).trim().parse().unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn bench_reports_default_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsain(&["bench"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().next().is_some_and(|l| l.starts_with("d1 =") && l.ends_with("= 144")), "{out}");
    for module in ["bdm", "sfe", "cfm", "sam", "head"] {
        assert!(out.lines().any(|l| l.starts_with(module)), "{module} missing:\n{out}");
    }
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dsain(&with_small(&["synth", "--out", "train.jsonl", "--test-out", "test.jsonl"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d.join("train.jsonl")).unwrap().lines().count(), 300);

    let o = dsain(
        &with_small(&["train", "--data", "train.jsonl", "--test-data", "test.jsonl", "--out", "run", "--steps", "12"]),
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 12);
    let trained_auc = report["test"]["auc"].as_f64().unwrap();

    let o = dsain(
        &["eval", "--config", "run/config.txt", "--checkpoint", "run/model.ckpt", "--data", "test.jsonl"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(m["n"], 100);
    assert_eq!(m["auc"].as_f64().unwrap(), trained_auc);
}

#[test]
fn eval_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dsain(&with_small(&["train", "--out", "run", "--steps", "1"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let o = dsain(
        &["eval", "--config", "run/config.txt", "--checkpoint", "run/model.ckpt", "--data", "empty.jsonl"],
        d,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(dsain(&with_small(&["train", "--out", "run", "--steps", "1"]), d).status.success());
    assert!(dsain(&with_small(&["synth", "--out", "t.jsonl"]), d).status.success());
    let o = dsain(
        &with_small(&["eval", "--checkpoint", "run/model.ckpt", "--data", "t.jsonl", "--set", "d_common=4"]),
        d,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = dsain(&with_small(&["train", "--seed", "4", "--out", out, "--steps", "8"]), d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    let losses = |p: &str| {
        let v: serde_json::Value = serde_json::from_slice(&read(p)).unwrap();
        v["step_losses"].clone()
    };
    assert_eq!(losses("a/report.json"), losses("b/report.json"));
}

#[test]
fn strict_ingest_aborts_on_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(dsain(&with_small(&["synth", "--out", "t.jsonl"]), d).status.success());
    let mut text = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    text.insert_str(0, "{not json\n");
    std::fs::write(d.join("t.jsonl"), text).unwrap();

    let o = dsain(&with_small(&["train", "--data", "t.jsonl", "--out", "run", "--steps", "1"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dsain(
        &with_small(&["train", "--data", "t.jsonl", "--strict-ingest", "--out", "run2", "--steps", "1"]),
        d,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn short_training_drops_below_chance_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsain(
        &[
            "train", "--out", "run", "--steps", "200", "--set", "seq_len=20", "--set", "window=5", "--set",
            "lr=0.01", "--set", "batch_size=32", "--set", "synth.train_records=6400", "--set",
            "synth.test_records=200",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    let steps = v["step_losses"].as_array().unwrap();
    assert_eq!(steps.len(), 200);
    let tail: f64 = steps[150..].iter().map(|x| x.as_f64().unwrap()).sum::<f64>() / 50.0;
    assert!(tail < std::f64::consts::LN_2, "{tail}");
}
