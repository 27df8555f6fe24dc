use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moduleformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_text(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn small_run_file(dir: &Path) -> String {
    write_text(
        dir,
        "run.toml",
        r#"
[model]
d_emb = 16
n_layer = 2
n_att = 4
d_att = 8
n_ffd = 4
d_ffd = 16
k_att = 2
k_ffd = 2
d_rtr = 8
vocab_size = 256
segment_length = 16
init_std = 0.1
seed = 4
"#,
    )
}

#[test]
fn check_passes_on_a_fresh_build() {
    let out = run(&["check", "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().count() >= 10);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn zero_budget_train_writes_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_text(dir.path(), "c.txt", "a few bytes of text to train on, or not\n");
    let cfg = small_run_file(dir.path());
    let metrics = dir.path().join("m.jsonl");
    let ckpt = dir.path().join("m.ckpt");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--corpus",
        &corpus,
        "--budget",
        "0",
        "--batch-tokens",
        "64",
        "--micro-batch-tokens",
        "32",
        "--metrics",
        metrics.to_str().unwrap(),
        "-o",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), "");
    assert!(ckpt.exists());
}

#[test]
fn bad_input_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
    let bad = write_text(dir.path(), "bad.toml", "[model]\nd_emb = 16\nwidth = 3\n");
    let corpus = write_text(dir.path(), "c.txt", "text\n");
    let out = run(&["train", "--config", &bad, "--corpus", &corpus, "-o", "/dev/null"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = run(&["eval", "--model", "/nonexistent.ckpt", "--data", &corpus]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_generate_extend_prune_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = "the cat sat on the mat and the dog sat on the log. ".repeat(40);
    let corpus = write_text(d, "a.txt", &text);
    let other = write_text(d, "b.txt", &"(1+2)*3=9\n(4-1)=3\n".repeat(60));
    let cfg = small_run_file(d);
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let common = ["--batch-tokens", "64", "--micro-batch-tokens", "32", "--log-every", "0"];

    let mut args = vec!["train", "--config", &cfg, "--corpus", &corpus, "--budget", "1280", "--holdout", "0.1"];
    let (m0, f0) = (s("m0.ckpt"), s("m0.jsonl"));
    args.extend(common);
    args.extend(["--metrics", &f0, "-o", &m0]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&f0).unwrap().lines().count(), 20);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["heldout_perplexity"].as_f64().unwrap().is_finite());

    let out = run(&["eval", "--model", &m0, "--data", &corpus]);
    assert!(out.status.success());
    let e: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(e["perplexity"].as_f64().unwrap() > 1.0);

    let out = run(&["generate", "--model", &m0, "--prompt", "the ", "--tokens", "12", "--seed", "1"]);
    assert!(out.status.success());
    assert!(out.stdout.starts_with(b"the "));

    let m1 = s("m1.ckpt");
    let mut args = vec!["extend", "--model", &m0, "--corpus", &other, "--budget", "640", "--new-experts", "2"];
    args.extend(common);
    args.extend(["-o", &m1]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let m2 = s("m2.ckpt");
    let out = run(&["prune", "--model", &m1, "--usage-from", &corpus, "--tau", "0", "-o", &m2]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(p["expert_params_after"].as_u64() <= p["expert_params_before"].as_u64());

    let out = run(&["stats", "--model", &m2, "--domain", &format!("text={corpus}"), "--domain", &format!("arith={other}")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("from\\to\ttext\tarith"));
}

#[test]
fn prune_refuses_when_too_few_experts_survive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = write_text(d, "a.txt", &"unbalanced routing on a fresh model ".repeat(10));
    let cfg = small_run_file(d);
    let m0 = d.join("m0.ckpt");
    let out = run(&[
        "train", "--config", &cfg, "--corpus", &corpus, "--budget", "0", "--batch-tokens", "64",
        "--micro-batch-tokens", "32", "-o", m0.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "prune", "--model", m0.to_str().unwrap(), "--usage-from", &corpus, "--tau", "0.99", "-o",
        d.join("m1.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("m1.ckpt").exists());
}
