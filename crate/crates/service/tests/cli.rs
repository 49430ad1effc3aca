use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_echo-agent"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a synthetic set and returns its question file.
fn gen_qa(dir: &Path, n: &str) -> PathBuf {
    let out = run(&["gen-qa", "--n", n, "--seed", "7", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("questions.qa.jsonl")
}

fn first_study(dir: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join("studies")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}

const EF_OPTIONS: [&str; 8] = [
    "--option",
    "Normal",
    "--option",
    "Mildly reduced",
    "--option",
    "Moderately reduced",
    "--option",
    "Severely reduced",
];

#[test]
fn eval_prints_an_accuracy_table() {
    let dir = tempfile::tempdir().unwrap();
    let questions = gen_qa(dir.path(), "12");
    let table = dir.path().join("table.md");
    let out = run(&[
        "eval",
        "--questions",
        questions.to_str().unwrap(),
        "--backend",
        "oracle,prior",
        "--seed",
        "3",
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.lines().next().unwrap() == "oracle  100.0", "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("prior   "), "{text}");
    let md = std::fs::read_to_string(table).unwrap();
    assert!(md.contains("| oracle | 100.0 |"), "{md}");
}

#[test]
fn ask_log_replays_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    gen_qa(dir.path(), "4");
    let study = first_study(dir.path());
    let events = dir.path().join("ask.events.jsonl");
    let mut args = vec![
        "ask",
        "--study",
        study.to_str().unwrap(),
        "--question",
        "Grade the LV systolic function.",
        "--category",
        "lv_systolic_function",
        "--events",
        events.to_str().unwrap(),
    ];
    args.extend(EF_OPTIONS);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("answer: "), "{text}");
    assert!(text.lines().any(|l| l.starts_with("choice: ")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("evidence: ")), "{text}");

    let out = run(&["replay", "--events", events.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "MATCH (1 outcome(s))");

    let log = std::fs::read_to_string(&events).unwrap();
    let mut lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines.last_mut().unwrap()["payload"]["outcome"]["iterations_used"] = json!(99);
    let tampered: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&events, tampered).unwrap();
    let out = run(&["replay", "--events", events.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("MISMATCH"), "{}", stdout(&out));
}

#[test]
fn bad_inputs_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let study = dir.path().join("bad.json");
    std::fs::write(&study, r#"{"study_id": "x", "clips": [{"clip_id": "c"}]}"#).unwrap();
    let out = run(&["ask", "--study", study.to_str().unwrap(), "--question", "Anything?"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    gen_qa(dir.path(), "4");
    let good = first_study(dir.path());
    let out = run(&["ask", "--study", good.to_str().unwrap(), "--question", "Q?", "--option", "only one"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["ask", "--study", good.to_str().unwrap(), "--question", "Q?", "--backend", "telepathy"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["eval", "--questions", dir.path().join("missing.qa.jsonl").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tools_run_in_a_child_process() {
    let dir = tempfile::tempdir().unwrap();
    gen_qa(dir.path(), "4");
    let study_path = first_study(dir.path());
    let study: Value = serde_json::from_str(&std::fs::read_to_string(&study_path).unwrap()).unwrap();
    let clip = study["clips"][0]["clip_id"].as_str().unwrap();

    let manifest = dir.path().join("manifest.json");
    let studies = dir.path().join("studies");
    let command = [env!("CARGO_BIN_EXE_echo-agent"), "tool-serve", "--studies", studies.to_str().unwrap()];
    std::fs::write(
        &manifest,
        json!({"mock_suite": false, "tools": [{"name": "measure", "executor": {"kind": "process", "command": command}}]})
            .to_string(),
    )
    .unwrap();
    let script = dir.path().join("script.json");
    std::fs::write(
        &script,
        json!([
            {"action": "call_tools", "calls": [{"tool": "measure", "arguments": {"clip_id": clip}}]},
            {"action": "final", "answer": {"text": "Measured out of process.", "cites": ["ef_pct"]}}
        ])
        .to_string(),
    )
    .unwrap();

    let out = run(&["tools", "list", "--manifest", manifest.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().count(), 1);
    assert!(stdout(&out).starts_with("measure"));

    let out = run(&[
        "ask",
        "--study",
        study_path.to_str().unwrap(),
        "--question",
        "What is the ejection fraction?",
        "--backend",
        "scripted",
        "--script",
        script.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let outcome: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(outcome["exit"], "answer");
    assert_eq!(outcome["response"]["evidence"][0]["finding"], "ef_pct");
    assert_eq!(outcome["response"]["evidence"][0]["artifact"]["producer_tool"], "measure");
}
