use std::path::PathBuf;
use std::process::Command;

use amsfw_cli::{check_report, run_scenario, Scenario};

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn amsfw() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_amsfw"));
    c.arg("--threads").arg("1");
    c
}

#[test]
fn every_shipped_scenario_parses() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            Scenario::load(&p).unwrap();
            n += 1;
        }
    }
    assert!(n >= 7);
}

#[test]
fn trivial_scenario_gives_one_and_the_checker_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::load(&scenario_file("trivial")).unwrap();
    s.output = tmp.path().to_path_buf();
    let r = run_scenario(&s).unwrap();
    assert!(r.trivial);
    assert!(r.cells.iter().all(|c| c.mean == 1.0 && c.n_var == 0.0));
    assert!(r.passed());
    let o = check_report(&s.dir().join("report.json")).unwrap();
    assert!(o.agree() && o.passed());
}

#[test]
fn tampered_flag_is_caught() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::load(&scenario_file("trivial")).unwrap();
    s.output = tmp.path().to_path_buf();
    run_scenario(&s).unwrap();
    let path = s.dir().join("report.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"pass\": true", "\"pass\": false", 1)).unwrap();
    assert!(!check_report(&path).unwrap().agree());
}

#[test]
fn binary_runs_and_checks_an_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = amsfw().args(["experiment", "run"]).arg(scenario_file("trivial")).arg("--out").arg(tmp.path()).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("PASS unbiased"));
    let report = tmp.path().join("trivial").join("report.json");
    let check = amsfw().args(["experiment", "check"]).arg(&report).output().unwrap();
    assert!(check.status.success());

    let csv = tmp.path().join("trivial").join("eps_0.25").join("ams_n16_k1.csv");
    let an = amsfw().args(["analyze", "variance", "--n", "16"]).arg(&csv).output().unwrap();
    assert!(an.status.success());
    let v: serde_json::Value = serde_json::from_slice(&an.stdout).unwrap();
    assert_eq!(v[0]["mean"], 1.0);
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nmodel = \"nope\"\nepsilons = [0.2]\n").unwrap();
    let out = amsfw().args(["ams", "run"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn catalog_lists_every_model() {
    let out = amsfw().arg("catalog").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["ou_1d", "double_well_1d", "two_channel", "two_channel_aligned"] {
        assert!(text.contains(name), "{name} missing");
    }
}

#[test]
fn qp_subcommand_reports_a_level_cost() {
    let out = amsfw().args(["action", "qp", "--model", "ou_1d", "--level", "1.0"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.48).abs() < 5e-3);
}
