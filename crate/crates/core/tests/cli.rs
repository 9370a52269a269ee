use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_zeroshot");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--out", s(dir), "--seed", "3", "--vocab-size", "40", "--triggers", "4",
        "--train-size", "150", "--dev-size", "40", "--test-size", "40",
    ]);
}

const TINY: &[&str] = &[
    "--set", "word_emb_dim=8", "--set", "char_emb_dim=3", "--set", "char_hidden=3", "--set", "word_hidden=8",
    "--set", "combined_h=8", "--set", "attention_e=4", "--set", "sentence_d=4", "--set", "max_epochs=2",
];

fn train(data: &Path, out: &Path, arch: &str) -> Output {
    let (tr, dev) = (data.join("train.tsv"), data.join("dev.tsv"));
    let mut args = vec!["train", "--train", s(&tr), "--dev", s(&dev), "--out", s(out), "--arch", arch, "--seed", "4"];
    args.extend_from_slice(TINY);
    run(&args)
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path());
    synth(b.path());
    for f in ["train.tsv", "dev.tsv", "test.tsv", "triggers.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn train_eval_label_visualize_round_trip() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let m1 = tempfile::tempdir().unwrap();
    let m2 = tempfile::tempdir().unwrap();
    for m in [&m1, &m2] {
        assert!(train(data.path(), m.path(), "attention").status.success());
    }
    assert!(train(data.path(), m1.path(), "tagger").status.success());
    for f in ["attention.ckpt", "attention.history.jsonl", "attention.timing.jsonl", "relfreq.tsv", "attention.config"] {
        assert!(m1.path().join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(m1.path().join("attention.history.jsonl")).unwrap(),
        std::fs::read(m2.path().join("attention.history.jsonl")).unwrap()
    );

    let test = data.path().join("test.tsv");
    let report = m1.path().join("report.jsonl");
    let out = ok(&["eval", "--data", s(&test), "--models", s(m1.path()), "--out", s(&report)]);
    let table = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["method", "model", "Sent-F1", "MAP", "P", "R", "F1"]);
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let methods: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["attention", "backprop", "relfreq", "supervised"]);
    for key in ["sentence_f1", "token_map", "token_precision", "token_recall", "token_f1"] {
        assert!(!rows[0][key].is_null(), "{key}");
    }
    let again = m1.path().join("again.jsonl");
    ok(&["eval", "--data", s(&test), "--models", s(m1.path()), "--out", s(&again)]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());

    let dump = ok(&["label", "--data", s(&test), "--model", s(&m1.path().join("attention.ckpt")), "--method", "backprop"]);
    let first = String::from_utf8(dump.stdout).unwrap();
    assert_eq!(first.lines().next().unwrap().split('\t').nth(2), Some("backprop"));
    let rf = ok(&["label", "--data", s(&test), "--model", s(&m1.path().join("relfreq.tsv"))]);
    assert!(String::from_utf8(rf.stdout).unwrap().contains("\trelfreq\t"));

    let html = m1.path().join("heat.html");
    ok(&["visualize", "--data", s(&test), "--model", s(&m1.path().join("attention.ckpt")), "--out", s(&html), "--limit", "5"]);
    let page = std::fs::read_to_string(&html).unwrap();
    assert_eq!(page.matches("<p class=\"s\">").count(), 5);
    assert!(!page.contains("http"));
}

#[test]
fn eval_skips_methods_without_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let empty = tempfile::tempdir().unwrap();
    let out = ok(&["eval", "--data", s(&data.path().join("test.tsv")), "--models", s(empty.path())]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("skipping attention"));
    assert!(err.contains("skipping relfreq"));
}

#[test]
fn usage_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = run(&["train", "--train", s(&missing), "--dev", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--attention", "cubic"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["eval", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn numerical_fault_exits_3() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path());
    let words = std::fs::read_to_string(data.path().join("train.tsv")).unwrap();
    let first = words.lines().next().unwrap().split('\t').next().unwrap().to_string();
    let emb = data.path().join("emb.txt");
    std::fs::write(&emb, format!("{first} nan 0 0 0 0 0 0 0\n")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let (tr, dev) = (data.path().join("train.tsv"), data.path().join("dev.tsv"));
    let mut args = vec!["train", "--train", s(&tr), "--dev", s(&dev), "--out", s(out.path())];
    args.extend_from_slice(TINY);
    let set = format!("embeddings={}", s(&emb));
    args.extend_from_slice(&["--set", &set]);
    let res = run(&args);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
