//! The command-line surface: exit codes, file contracts, and a short
//! end-to-end pipeline.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptfuse")).args(args).output().expect("spawn promptfuse")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny corpus with N-best lists plus a config that keeps every phase short.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth-gen", "--out", s(&data), "--seed", "3", "--train-recordings", "6", "--eval-recordings", "2",
        "--lm-recordings", "4", "--utterances-per-recording", "4", "--nbest", "4",
    ]);
    let cfg = "phase0.steps = 12\nphase1.steps = 12\nphase2.steps = 8\nphase3.steps = 8\n";
    std::fs::write(dir.path().join("short.cfg"), cfg).unwrap();
    dir
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["eval", "--ref", "a", "--hyp", "b", "--bogus"]), 1);
    assert_eq!(code(&["--jobs", "0", "gate-report", "--model", "m"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_files_exit_2_and_name_the_path() {
    let out = run(&["gate-report", "--model", "/nonexistent/m.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/m.ckpt"));
    assert_eq!(code(&["eval", "--ref", "/nonexistent/ref", "--hyp", "/nonexistent/hyp"]), 2);
}

#[test]
fn failed_gradcheck_exits_3() {
    // nothing can beat a zero tolerance
    assert_eq!(code(&["gradcheck", "--samples", "20", "--tolerance", "0"]), 3);
    let out = ok(&["gradcheck", "--samples", "50"]);
    assert!(out.lines().last() == Some("ok"), "{out}");
}

#[test]
fn synth_gen_refuses_a_populated_directory() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let args = ["synth-gen", "--out", s(dir.path()), "--train-recordings", "2", "--eval-recordings", "1", "--lm-recordings", "1"];
    assert_eq!(code(&args), 1, "refusal is a usage error: --force fixes it");
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn eval_of_the_reference_against_itself_is_perfect() {
    let dir = setup();
    let m = dir.path().join("data/eval_target.manifest");
    let out = ok(&["eval", "--ref", s(&m), "--hyp", s(&m), "--homophones", s(&dir.path().join("data/homophones.txt"))]);
    assert!(out.contains("wer=0.000000"), "{out}");
    assert!(out.lines().any(|l| l == "homophone_recall=1.000000" || l == "homophone_recall=undefined"), "{out}");
}

#[test]
fn pipeline_runs_end_to_end_without_touching_inputs() {
    let dir = setup();
    let d = |name: &str| dir.path().join(name);
    let data = d("data");
    let ckpt = d("m.ckpt");

    ok(&["train", "--data", s(&data), "--out", s(&d("fresh.ckpt")), "--config", s(&d("short.cfg")), "--phase", "1"]);
    // a fresh bundle with zero phase-1 steps still has closed gates
    std::fs::write(d("zero.cfg"), "phase1.steps = 0\n").unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&d("zero.ckpt")), "--config", s(&d("zero.cfg")), "--phase", "1"]);
    let gates = ok(&["gate-report", "--model", s(&d("zero.ckpt"))]);
    assert!(!gates.is_empty() && gates.lines().all(|l| l.ends_with("\t0.000000\t0.000000")), "{gates}");

    let train = ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&d("short.cfg")), "--seed", "1", "--log", s(&d("loss.csv"))]);
    assert!(train.contains("trainable parameters"), "{train}");
    let log = std::fs::read_to_string(d("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,phase,lr,loss"));
    assert_eq!(log.lines().count(), 1 + 12 + 12 + 8 + 8);

    let manifest = data.join("eval_target.manifest");
    let nbest_in = data.join("nbest_eval_target.txt");
    let before = (std::fs::read(&manifest).unwrap(), std::fs::read(&nbest_in).unwrap());

    ok(&["decode", "--model", s(&ckpt), "--manifest", s(&manifest), "--out", s(&d("dec.txt")), "--beam", "3",
        "--prompt-mode", "file", "--prompt-file", s(&data.join("prompt_target.txt"))]);
    ok(&["rerank", "--nbest", s(&nbest_in), "--lm", s(&ckpt), "--out", s(&d("rr.txt")),
        "--prompt-file", s(&data.join("prompt_target.txt"))]);
    ok(&["rerank", "--nbest", s(&d("dec.txt")), "--lm", s(&ckpt), "--out", s(&d("rr_hist.txt")),
        "--prompt-mode", "history-hyp", "--manifest", s(&manifest)]);
    for hyp in ["dec.txt", "rr.txt", "rr_hist.txt"] {
        let out = ok(&["eval", "--ref", s(&manifest), "--hyp", s(&d(hyp))]);
        assert!(out.lines().any(|l| l.starts_with("wer=")), "{hyp}: {out}");
    }
    assert_eq!(before, (std::fs::read(&manifest).unwrap(), std::fs::read(&nbest_in).unwrap()));

    // writing over an input is refused
    assert_ne!(code(&["rerank", "--nbest", s(&nbest_in), "--lm", s(&ckpt), "--out", s(&nbest_in)]), 0);
    assert_eq!(before.1, std::fs::read(&nbest_in).unwrap());

    // history modes need the recording structure
    assert_ne!(code(&["rerank", "--nbest", s(&nbest_in), "--lm", s(&ckpt), "--out", s(&d("x.txt")), "--prompt-mode", "history-gt"]), 0);
}

#[test]
fn a_sidecar_that_contradicts_the_checkpoint_is_a_data_error() {
    let dir = setup();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    std::fs::write(dir.path().join("zero.cfg"), "phase1.steps = 0\n").unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&dir.path().join("zero.cfg")), "--phase", "1"]);
    std::fs::write(dir.path().join("m.ckpt.cfg"), "lm.layers = 3\n").unwrap();
    assert_eq!(code(&["gate-report", "--model", s(&ckpt)]), 2);
}
