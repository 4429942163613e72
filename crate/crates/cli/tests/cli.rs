use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

const MM: &str = r#"{"kind": "classical", "dimension": 3,
 "rates": [{"from": 1, "to": 2, "value": 1}, {"from": 2, "to": 1, "value": 1},
           {"from": 2, "to": 3, "value": 2}, {"from": 3, "to": 1, "value": 3}],
 "detector": {"from": 3, "to": 1}}"#;

const TWO_STATE: &str = r#"{"kind": "classical", "dimension": 2,
 "rates": [{"from": 1, "to": 2, "value": 2}, {"from": 2, "to": 1, "value": 3}],
 "detector": {"from": 1, "to": 2}}"#;

const TWO_STATE_STRUCTURE: &str = r#"{"template": {"kind": "classical", "dimension": 2, "rates": [],
 "detector": {"from": 1, "to": 2}},
 "unknowns": [{"rate": {"from": 1, "to": 2}}, {"rate": {"from": 2, "to": 1}}]}"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox { dir: tempfile::tempdir().unwrap() }
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with_stdin(args, None)
    }

    fn run_with_stdin(&self, args: &[&str], stdin: Option<&[u8]>) -> Output {
        let mut child = Command::new(env!("CARGO_BIN_EXE_ics"))
            .args(args)
            .current_dir(self.dir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut input = child.stdin.take().unwrap();
        if let Some(bytes) = stdin {
            input.write_all(bytes).unwrap();
        }
        drop(input);
        child.wait_with_output().unwrap()
    }
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not a report ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn forward_reports_mm_cumulants() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let out = sb.run(&["forward", "mm.json", "--orders", "3", "--oracle"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["status"], "ok");
    assert_eq!(r["verb"], "forward");
    assert_eq!(r["schema_version"], 1);
    let c = floats(&r["result"]["cumulants"]["cumulants"]);
    for (x, e) in c.iter().zip([3.0 / 7.0, 12.0 / 49.0, 192.0 / 2401.0]) {
        assert!((x - e).abs() < 1e-12, "{x} vs {e}");
    }
    assert_eq!(floats(&r["result"]["charpoly"]["a"]), vec![0.0, 14.0, 7.0, 1.0]);
    assert!(r["result"]["oracle"]["max_relative_difference"].as_f64().unwrap() < 1e-6);
    let ss = floats(&r["result"]["steady_state"]);
    assert!((ss[0] - 9.0 / 14.0).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.428571"));
}

#[test]
fn exact_forward_matches_float_forward() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let a = report(&sb.run(&["forward", "mm.json", "--orders", "8"]));
    let b = report(&sb.run(&["forward", "mm.json", "--orders", "8", "--exact"]));
    assert_eq!(b["result"]["exact"], true);
    for (x, y) in floats(&a["result"]["cumulants"]["cumulants"])
        .iter()
        .zip(floats(&b["result"]["cumulants"]["cumulants"]))
    {
        assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let a = sb.run(&["forward", "mm.json"]);
    let b = sb.run(&["forward", "mm.json"]);
    assert_eq!(a.stdout, b.stdout);
    let s1 = sb.run(&["simulate", "mm.json", "--time", "5000", "--window", "10", "--seed", "3"]);
    let s2 = sb.run(&["simulate", "mm.json", "--time", "5000", "--window", "10", "--seed", "3"]);
    assert_eq!(s1.status.code(), Some(0));
    assert_eq!(s1.stdout, s2.stdout);
}

#[test]
fn output_flag_writes_report_and_prints_summary() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let out = sb.run(&["forward", "mm.json", "-o", "f.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("cumulants c1..c4"));
    let r = read(&sb.path("f.json"));
    assert_eq!(r["inputs"][0]["path"], "mm.json");
    assert_eq!(r["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn forward_output_feeds_reconstruction_through_a_pipe() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let fwd = sb.run(&["forward", "mm.json"]);
    let out = sb.run_with_stdin(&["recon-poly", "-", "--dimension", "3"], Some(&fwd.stdout));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["result"]["unique"], true);
    let a = floats(&r["result"]["charpoly"]["a"]);
    for (x, e) in a.iter().zip([0.0, 14.0, 7.0, 1.0]) {
        assert!((x - e).abs() < 1e-8, "{a:?}");
    }
}

#[test]
fn predict_extends_the_sequence() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    sb.run(&["forward", "mm.json", "--orders", "6", "-o", "f.json"]);
    let full = floats(&read(&sb.path("f.json"))["result"]["cumulants"]["cumulants"]);
    sb.file("c4.json", &format!("{{\"cumulants\": {:?}}}", &full[..4]));
    let out = sb.run(&["predict", "c4.json", "--dimension", "3", "--orders", "6"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let predicted = floats(&report(&out)["result"]["predicted"]);
    assert_eq!(predicted.len(), 6);
    for (p, v) in predicted[4..].iter().zip(&full[4..]) {
        assert!((p - v).abs() < 1e-6 * v.abs().max(1.0), "{p} vs {v}");
    }
}

#[test]
fn classical_two_state_hypothesis_is_rejected_for_mm() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    sb.run(&["forward", "mm.json", "-o", "f.json"]);
    let out = sb.run(&["test", "f.json", "--hypothesis", "classical", "--assume", "dim=2", "--threshold", "1e-6"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["result"]["decision"], "reject", "{r}");

    let scan = report(&sb.run(&["test", "f.json", "--hypothesis", "dim", "--assume", "classical", "--threshold", "1e-8"]));
    assert_eq!(scan["result"]["bound"], 3, "{scan}");
}

#[test]
fn two_state_closed_form_recovery() {
    let sb = Sandbox::new();
    sb.file("two.json", TWO_STATE);
    sb.file("s.json", TWO_STATE_STRUCTURE);
    sb.run(&["forward", "two.json", "--orders", "2", "-o", "f.json"]);
    let r = report(&sb.run(&["recover", "s.json", "f.json", "--mode", "closed-form"]));
    let mut sols: Vec<Vec<f64>> = r["result"]["solutions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| floats(&s["parameters"]))
        .collect();
    sols.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(sols.len(), 2);
    assert!((sols[0][0] - 2.0).abs() < 1e-12 && (sols[0][1] - 3.0).abs() < 1e-12);
    assert!((sols[1][0] - 3.0).abs() < 1e-12 && (sols[1][1] - 2.0).abs() < 1e-12);
}

#[test]
fn super_poissonian_two_state_data_is_a_domain_failure() {
    let sb = Sandbox::new();
    sb.file("s.json", TWO_STATE_STRUCTURE);
    sb.file("c.json", r#"{"cumulants": [1.0, 1.2]}"#);
    let out = sb.run(&["recover", "s.json", "c.json", "--mode", "closed-form"]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["status"], "error");
    assert!(r["error"]["kind"].is_string());
}

#[test]
fn usage_errors_exit_with_two() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    for args in [
        vec!["forward", "mm.json", "--orders", "0"],
        vec!["forward", "mm.json", "--orders", "-1"],
        vec!["forward", "missing.json"],
        vec!["frobnicate"],
        vec!["test", "mm.json", "--hypothesis", "classical"],
        vec!["recon-poly", "-", "--dimension", "3", "-"],
    ] {
        let out = sb.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn malformed_documents_name_line_and_column() {
    let sb = Sandbox::new();
    sb.file("bad.json", "{\"kind\": \"classical\",\n  \"dimension\": ,}");
    let out = sb.run(&["forward", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json") && err.contains("line 2") && err.contains("column"), "{err}");
}

#[test]
fn embedding_factorizes() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let out = sb.run(&["embed", "mm.json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r["result"]["factorization"]["residual"].as_f64().unwrap() < 1e-10, "{r}");
}

#[test]
fn simulated_trace_is_accepted_by_test() {
    let sb = Sandbox::new();
    sb.file("mm.json", MM);
    let out = sb.run(&["simulate", "mm.json", "--time", "200000", "--window", "100", "--seed", "5", "-o", "sim.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read(&sb.path("sim.json"));
    let c = floats(&r["result"]["cumulants"]["cumulants"]);
    assert!((c[0] - 3.0 / 7.0).abs() < 0.02, "{c:?}");
    let t = sb.run(&["test", "sim.json", "--hypothesis", "classical", "--assume", "dim=2", "--threshold", "3sigma"]);
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(report(&t)["result"]["decision"].is_string());
}

#[test]
fn multistart_recovery_finds_both_two_state_labelings() {
    let sb = Sandbox::new();
    sb.file("two.json", TWO_STATE);
    sb.file("s.json", TWO_STATE_STRUCTURE);
    sb.run(&["forward", "two.json", "--orders", "3", "-o", "f.json"]);
    let out = sb.run(&["recover", "s.json", "f.json", "--starts", "32", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    let sols = r["result"]["solutions"].as_array().unwrap();
    assert_eq!(sols.len(), 2, "{r}");
    assert!(sols.iter().all(|s| s["verified"] == true));
    let again = sb.run(&["recover", "s.json", "f.json", "--starts", "32", "--seed", "1"]);
    assert_eq!(out.stdout, again.stdout);
}
