use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "docs", "fixtures", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairsearch")).args(args).output().expect("spawn")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

#[test]
fn parity_example_reports_known_utility() {
    let out = run(&["solve-pandora", "--instance", &fixture("example_fs.json"), "--constraints", &fixture("parity_selection.json")]);
    let v = json(&out);
    assert_eq!(v["utility"].as_f64(), Some(6.5625));
    assert_eq!(v["schema"], "cs-1");
    assert!(v["slacks"][0].as_f64().unwrap().abs() < 1e-12);
    let sel: f64 = v["select_prob"].as_array().unwrap()[2..].iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sel - 0.5).abs() < 1e-12);
}

#[test]
fn unconstrained_example() {
    let v = json(&run(&["solve-pandora", "--instance", &fixture("example_fs.json")]));
    assert_eq!(v["utility"].as_f64(), Some(7.0625));
}

#[test]
fn output_is_byte_identical_across_runs() {
    let args = ["solve-pandora", "--instance", &fixture("example_fs.json"), "--constraints", &fixture("parity_selection.json"), "--trials", "500", "--seed", "3"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let sim = ["simulate", "--config", &fixture("simulate_small.json")];
    assert_eq!(run(&sim).stdout, run(&sim).stdout);
}

#[test]
fn out_file_matches_stdout_and_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let args = ["solve-multi", "--instance", &fixture("counterexample.json"), "--constraints", &fixture("counterexample_constraints.json")];
    let stdout = run(&args).stdout;
    let mut with_out = args.to_vec();
    let p = path.to_string_lossy().into_owned();
    with_out.extend(["--out", &p]);
    assert!(run(&with_out).status.success());
    let written = std::fs::read(&path).unwrap();
    assert_eq!(written, stdout);
    let v: Value = serde_json::from_slice(&written).unwrap();
    for s in v["slacks"].as_array().unwrap() {
        assert!(s.as_f64().unwrap().abs() < 1e-8, "slack {s}");
    }
}

#[test]
fn exit_codes() {
    let infeasible = run(&["solve-pandora", "--instance", &fixture("example_fs.json"), "--constraints", &fixture("infeasible.json")]);
    assert_eq!(infeasible.status.code(), Some(2));
    assert_eq!(run(&["solve-pandora"]).status.code(), Some(1));
    assert_eq!(run(&["solve-pandora", "--instance", "/nonexistent/x.json"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"boxes\": 3").unwrap();
    assert_eq!(run(&["solve-pandora", "--instance", &bad.to_string_lossy()]).status.code(), Some(1));
}

#[test]
fn simulate_emits_one_row() {
    let out = run(&["simulate", "--config", &fixture("simulate_small.json")]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("scenario_id,rho,k"));
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn markov_commands_run() {
    let inst = fixture("two_chains.json");
    for cmd in ["solve-jms", "gittins", "collapse"] {
        let v = json(&run(&[cmd, "--instance", &inst]));
        assert_eq!(v["command"], cmd);
    }
    let g = json(&run(&["grdip", "--instance", &inst, "--constraints", &fixture("grdip_quadratic.json")]));
    assert!(g["objective"].as_f64().is_some());
}
