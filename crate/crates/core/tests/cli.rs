use std::process::{Command, Output};

use svmcheck::invariants::Verdict;

fn svmcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svmcheck")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn replay_attack_exits_1_with_trace() {
    let o = svmcheck(&["verify", "corpus:vm_suspend_resume_original"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("replay"), "{out}");
    assert!(out.contains("FAIL"), "{out}");
}

#[test]
fn passing_model_exits_0() {
    let o = svmcheck(&["verify", "corpus:cloudmonatt_external"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn missing_file_exits_3() {
    let o = svmcheck(&["verify", "definitely/missing.svm"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_FILE_NOT_FOUND"));
}

#[test]
fn usage_errors_exit_3() {
    assert_eq!(svmcheck(&["frobnicate"]).status.code(), Some(3));
    assert_eq!(svmcheck(&["verify", "corpus:vm_startup", "--format", "xml"]).status.code(), Some(3));
    assert_eq!(svmcheck(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_corpus_entry_exits_3() {
    let o = svmcheck(&["verify", "corpus:nope"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn json_report_round_trips_verdict() {
    for (name, code) in [("vm_suspend_resume_original", 1), ("vm_startup", 0)] {
        let o = svmcheck(&["verify", &format!("corpus:{name}"), "--format", "json"]);
        assert_eq!(o.status.code(), Some(code));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let verdict: Verdict = serde_json::from_value(v["verdict"].clone()).unwrap();
        let direct = svmcheck::verify(&svmcheck::corpus::load(name).unwrap(), &Default::default()).unwrap();
        assert_eq!(verdict, direct.verdict);
    }
}

#[test]
fn file_targets_and_check() {
    let dir = std::env::temp_dir().join(format!("svmcheck-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let good = dir.join("fixed.svm");
    std::fs::write(&good, svmcheck::corpus::source("vm_suspend_resume_fixed").unwrap()).unwrap();
    let o = svmcheck(&["check", good.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = svmcheck(&["verify", good.to_str().unwrap(), "--workers", "0"]);
    assert_eq!(o.status.code(), Some(0));

    let bad = dir.join("bad.svm");
    std::fs::write(&bad, "svm-format-version 1\nmodel x\nsubject a trusted {\n").unwrap();
    let o = svmcheck(&["check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.svm:"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn trace_and_ablate() {
    let o = svmcheck(&["trace", "corpus:vm_suspend_resume_original", "--invariant", "I1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("replay"));
    let o = svmcheck(&["trace", "corpus:vm_startup", "--invariant", "I9"]);
    assert_eq!(o.status.code(), Some(3));

    let o = svmcheck(&["ablate", "corpus:cloudmonatt_external"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for c in ["C1", "C2", "C3"] {
        assert!(out.contains(&format!("{c}: necessary")), "{out}");
    }
}

#[test]
fn list_shows_all_entries() {
    let o = svmcheck(&["list", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 12);
}
