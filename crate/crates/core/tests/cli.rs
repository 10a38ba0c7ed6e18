use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kppo"))
        .args(args)
        .env_remove("KPPO_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(dir: &Path, extra: &[&str]) -> PathBuf {
    let d = dir.to_str().unwrap();
    let mut args = vec!["fixture", d, "--iterations", "4"];
    args.extend_from_slice(extra);
    let out = kppo(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("config.toml")
}

fn fresh_calls(run: &Path) -> usize {
    fs::read_to_string(run.join("responses.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"adapter\":\"cache\""))
        .count()
}

#[test]
fn dry_run_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), &[]);
    let out = kppo(&["run", "--config", config.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("config ok"), "{text}");
    assert!(text.contains("train 25, val 10"), "{text}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn http_adapter_without_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), &[]);
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("adapter = \"fact-gated\"", "adapter = \"http\"\nbase_url = \"http://127.0.0.1:9\"\nmodel = \"m\"");
    fs::write(&config, text).unwrap();
    let out = kppo(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("KPPO_API_KEY"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn inspect_flags_a_wide_topic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("star.md");
    let mut text = String::from("# Star\n");
    for i in 0..17 {
        text.push_str(&format!("- point {i}\n"));
    }
    fs::write(&path, text).unwrap();
    let out = kppo(&["inspect", path.to_str().unwrap()]);
    assert!(out.status.success());
    let shown = stdout(&out);
    assert!(shown.contains("LOCAL  (root) > Star: outdeg 17 > C=16"), "{shown}");
    assert!(shown.contains("[local]"));

    let out = kppo(&["inspect", path.to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["local_violations"].as_array().unwrap().len(), 1);
}

#[test]
fn inspect_reports_a_clean_tree() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ok.md");
    fs::write(&path, "Intro.\n\n# A\n- one\n## B\n- two\n").unwrap();
    let out = kppo(&["inspect", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).ends_with("no violations\n"));
}

#[test]
fn inspect_rejects_bad_limits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ok.md");
    fs::write(&path, "# A\n").unwrap();
    let out = kppo(&["inspect", path.to_str().unwrap(), "--max-children", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixture_run_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), &[]);
    let cfg = config.to_str().unwrap();
    let run = dir.path().join("run");

    let out = kppo(&["run", "--config", cfg, "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["learning_gain"].as_f64().unwrap() > 0.0);
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
    for name in ["final_prompt.md", "final.json", "report.txt", "report.json", "checkpoint.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }

    let out = kppo(&["report", run.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let again: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(again, report);
    let out = kppo(&["report", run.to_str().unwrap()]);
    assert!(stdout(&out).contains("learning gain:"));

    // resuming a finished run only redoes final selection, from cache
    let before = fresh_calls(&run);
    let checkpoint = run.join("checkpoint.json");
    let out = kppo(&["resume", "--checkpoint", checkpoint.to_str().unwrap(), "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fresh_calls(&run), before);
}

#[test]
fn stop_after_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), &["--over-branched", "--pruning"]);
    let cfg = config.to_str().unwrap();
    let checkpoint = dir.path().join("run").join("checkpoint.json");
    let out = kppo(&["run", "--config", cfg, "--stop-after", "2"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("stopped after step 2"));
    assert!(!dir.path().join("run").join("final.json").exists());
    let out = kppo(&["resume", "--checkpoint", checkpoint.to_str().unwrap(), "--config", cfg, "--json"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
}

#[test]
fn report_on_missing_dir_fails() {
    let out = kppo(&["report", "/nonexistent/run"]);
    assert_eq!(out.status.code(), Some(2));
}
