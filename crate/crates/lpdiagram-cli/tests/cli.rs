use std::path::{Path, PathBuf};
use std::process::Command;

fn instance(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("instances").join(name)
}

/// Runs the binary; returns the exit code and the report text, if written.
fn run(args: &[&str], input: &Path) -> (i32, Option<String>) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let status = Command::new(env!("CARGO_BIN_EXE_lpdiagram"))
        .args(args)
        .arg("--in")
        .arg(input)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    (status.code().unwrap(), std::fs::read_to_string(&out).ok())
}

fn write_tmp(dir: &tempfile::TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("in.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn diagram_has_three_intervals() {
    let (code, out) = run(&["diagram"], &instance("two_term.json"));
    assert_eq!(code, 0);
    let v = json(&out.unwrap());
    assert_eq!(v["intervals"].as_array().unwrap().len(), 3);
}

#[test]
fn reports_are_byte_identical() {
    for (cmd, file) in [("diagram", "two_term.json"), ("verify", "two_term.json"), ("countex", "countex.json"), ("rectilinearize", "rect.json")] {
        let a = run(&[cmd, "--seed", "7"], &instance(file)).1.unwrap();
        let b = run(&[cmd, "--seed", "7"], &instance(file)).1.unwrap();
        assert_eq!(a, b, "{cmd}");
    }
}

#[test]
fn countex_contrast() {
    let (code, out) = run(&["countex"], &instance("countex.json"));
    assert_eq!(code, 0);
    let v = json(&out.unwrap());
    assert!((v["f"]["sup"].as_f64().unwrap() - 10f64.ln()).abs() < 1e-3);
    assert_eq!(v["f"]["bounded"], true);
    assert_eq!(v["split_terms"]["log y1"]["bounded"], false);
    assert_eq!(v["candidates"][1]["leading"]["eps"], "1/2");
}

#[test]
fn verify_meets_threshold() {
    let (code, out) = run(&["verify"], &instance("two_term.json"));
    assert_eq!(code, 0);
    let v = json(&out.unwrap());
    assert_eq!(v["samples"], 100);
    assert!(v["agreement"].as_f64().unwrap() >= 0.99);
}

#[test]
fn other_commands_succeed() {
    for (cmd, file) in [("classify", "classify.json"), ("dickson", "dickson.json"), ("split", "split.json"), ("rectilinearize", "rect.json")] {
        let (code, out) = run(&[cmd], &instance(file));
        assert_eq!(code, 0, "{cmd}");
        assert!(out.is_some());
    }
    let v = json(&run(&["split"], &instance("split.json")).1.unwrap());
    assert_eq!(v["recombines"], true);
    let v = json(&run(&["rectilinearize"], &instance("rect.json")).1.unwrap());
    assert_eq!(v["check"]["collisions"], 0);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], &instance("two_term.json")).0, 2);
    assert_eq!(run(&["diagram"], &write_tmp(&dir, r#"{"pieces": []}"#)).0, 2);
    assert_eq!(run(&["diagram"], &write_tmp(&dir, "{ not json")).0, 2);
    assert_eq!(run(&["diagram"], &dir.path().join("absent.json")).0, 2);
    assert_eq!(run(&["split"], &write_tmp(&dir, r#"{"q": "1"}"#)).0, 2);
}

#[test]
fn missing_q_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lpdiagram"))
        .args(["diagram", "--in"])
        .arg(write_tmp(&dir, "{}"))
        .arg("--out")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("$.q"));
}

#[test]
fn caps_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json(&std::fs::read_to_string(instance("two_term.json")).unwrap());
    v["options"] = serde_json::json!({ "max_configs": 1 });
    assert_eq!(run(&["diagram"], &write_tmp(&dir, &v.to_string())).0, 3);
}

#[test]
fn failed_check_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json(&std::fs::read_to_string(instance("two_term.json")).unwrap());
    v["options"] = serde_json::json!({ "verify_samples": 10, "verify_threshold": 1.5 });
    let (code, out) = run(&["verify"], &write_tmp(&dir, &v.to_string()));
    assert_eq!(code, 4);
    // The report is still written.
    assert!(out.is_some());
}
