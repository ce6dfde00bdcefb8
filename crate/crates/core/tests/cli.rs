use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msc-nmt"));
    cmd.env_remove("MSC_SEED").env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_then_preprocess_reports_script_groups() {
    let dir = tempfile::tempdir().unwrap();
    for (script, group, ks) in [
        ("latin", 1, "0,0,1,1,3,3,5,5"),
        ("cjk", 3, "0,0,1,1,5,5,7,7"),
    ] {
        let out = run(
            &[
                "generate",
                "--task",
                "copy",
                "--script",
                script,
                "--size",
                "40",
                "--out-src",
                "s.txt",
                "--out-tgt",
                "t.txt",
            ],
            dir.path(),
        );
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let out = run(
            &[
                "preprocess",
                "--src",
                "s.txt",
                "--tgt",
                "t.txt",
                "--out",
                script,
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
        let stats = read_json(&dir.path().join(script).join("stats.json"));
        assert_eq!(stats["pairs"], 40);
        assert_eq!(stats["dominant_group"], group);
        assert_eq!(stats["recommended_k_series"], ks);
        let ids = std::fs::read_to_string(dir.path().join(script).join("src.ids")).unwrap();
        assert_eq!(ids.lines().count(), 40);

        let manifest = read_json(&dir.path().join(script).join("run_manifest.json"));
        assert_eq!(manifest["status"], "ok");
        assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
        assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn eval_of_reference_against_itself_is_100() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("ref.txt"),
        "the cat sat on the mat\nhello there world\n",
    )
    .unwrap();
    let out = run(
        &[
            "eval",
            "--hyp",
            "ref.txt",
            "--ref",
            "ref.txt",
            "--run-dir",
            "ev",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("BLEU = 100.00"), "{}", stdout(&out));
    assert!(dir.path().join("ev/bleu.json").exists());
}

#[test]
fn eval_with_mismatched_line_counts_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.txt"), "one\ntwo\n").unwrap();
    std::fs::write(dir.path().join("b.txt"), "one\n").unwrap();
    let out = run(
        &[
            "eval",
            "--hyp",
            "a.txt",
            "--ref",
            "b.txt",
            "--run-dir",
            "ev",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_for_msc_scope() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gradcheck",
            "--scope",
            "msc",
            "--seeds",
            "3",
            "--run-dir",
            "gc",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(
        stdout(&out).contains("PASS, max rel err"),
        "{}",
        stdout(&out)
    );
    assert!(dir.path().join("gc/gradcheck.json").exists());
    assert_eq!(
        read_json(&dir.path().join("gc/run_manifest.json"))["seed"],
        0
    );
}

#[test]
fn bad_k_series_exits_2_and_names_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"model": {"k_series": "0,0,1,1,3,4,5,7"},
                  "data": {"synthetic": {"task": "copy", "script": "latin", "train_size": 5, "valid_size": 2}}}"#;
    std::fs::write(dir.path().join("bad.json"), cfg).unwrap();
    let out = run(
        &["train", "--config", "bad.json", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"4\""));
    let manifest = read_json(&dir.path().join("run/run_manifest.json"));
    assert!(manifest["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.txt"), "abc\n").unwrap();
    let out = run(
        &[
            "translate",
            "--checkpoint",
            "nowhere",
            "--input",
            "in.txt",
            "--run-dir",
            "tr",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_translate_from_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "seed": 3,
        "model": {"preset": "desk", "d_model": 16, "ffn_dim": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1,
                  "k_series": "0,1,3,5", "max_positions": 64},
        "train": {"preset": "desk", "warmup_steps": 5},
        "data": {"synthetic": {"task": "copy", "script": "cyrillic", "train_size": 40, "valid_size": 5}}
    }"#;
    std::fs::write(dir.path().join("tiny.json"), cfg).unwrap();
    let out = run(
        &[
            "train",
            "--config",
            "tiny.json",
            "--out",
            "run",
            "--max-steps",
            "6",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["steps"], 6);
    assert!(dir.path().join("run/final").is_dir());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("run/train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        summary["validations"].as_u64().unwrap() as usize
    );
    assert_eq!(
        read_json(&dir.path().join("run/run_manifest.json"))["seed"],
        3
    );

    let mut child = bin()
        .args([
            "translate",
            "--checkpoint",
            "run/final",
            "--beam",
            "2",
            "--run-dir",
            "tr",
        ])
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all("привет\n漢字 🙂\n".as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn env_seed_is_used_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "generate",
            "--task",
            "reverse",
            "--script",
            "latin",
            "--size",
            "5",
            "--out-src",
            "s",
            "--out-tgt",
            "t",
        ])
        .env("MSC_SEED", "42")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        read_json(&dir.path().join("runs/generate/run_manifest.json"))["seed"],
        42
    );
}
