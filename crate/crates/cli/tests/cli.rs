use std::process::{Command, Output};

use serde_json::Value;

fn dpflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid json")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn solve_dopf_reports_objective_and_dispatch() {
    let v = json(&dpflow(&["solve-dopf"]));
    assert!(v["objective"].as_f64().unwrap() > 0.0);
    assert_eq!(floats(&v["g_p"]).len(), 15);
    assert_eq!(v["units"], "mw");
}

#[test]
fn ccopf_sigma_matches_calibration() {
    let flags = ["--beta-frac", "0.10", "--epsilon", "1", "--delta", "0.0714"];
    let mut args = vec!["solve-ccopf"];
    args.extend(flags);
    args.extend(["--eta-g", "0.01", "--eta-u", "0.02", "--eta-f", "0.10"]);
    let sol = json(&dpflow(&args));
    let mut cal_args = vec!["calibrate"];
    cal_args.extend(flags);
    let cal = json(&dpflow(&cal_args));
    assert_eq!(floats(&sol["solution"]["sigma"]), floats(&cal["sigma"]));
    assert_eq!(floats(&sol["spec"]["sigma"]), floats(&cal["sigma"]));
}

#[test]
fn sensitivity_table_stays_within_beta() {
    let v = json(&dpflow(&["validate", "sensitivity", "--beta-frac", "0.10", "--steps", "1"]));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 14);
    for r in rows {
        let (b, s) = (r["beta"].as_f64().unwrap(), r["sensitivity"].as_f64().unwrap());
        assert!(s <= b + 1e-5, "node {}: {s} > {b}", r["node"]);
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = dpflow(&["solve-dopf", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn every_subcommand_has_help() {
    let cases: &[(&[&str], &[&str])] = &[
        (&["solve-dopf"], &["--case", "--out", "--format"]),
        (&["solve-ccopf"], &["--variant", "--psi", "--sigma-hat-file", "--theta", "--varrho", "--eta-g", "--eta-u", "--eta-f"]),
        (&["mechanism", "run"], &["--seed", "--resamples", "--epsilon"]),
        (&["mechanism", "op-baseline"], &["--seed", "--protect"]),
        (&["validate", "mc"], &["--samples", "--histogram-line", "--bins"]),
        (&["validate", "sensitivity"], &["--beta-frac", "--steps"]),
        (&["validate", "stdfloor"], &["--beta-frac"]),
        (&["validate", "dpratio"], &["--node", "--beta-mw", "--delta"]),
        (&["validate", "cvar-sweep"], &["--thetas", "--varrho"]),
        (&["validate", "timeseries"], &["--node", "--steps"]),
        (&["calibrate"], &["--epsilon", "--delta", "--beta-frac"]),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let out = dpflow(&args);
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd:?} help lacks {f}");
        }
    }
}

#[test]
fn same_seed_gives_identical_output() {
    let args = ["mechanism", "run", "--seed", "11"];
    let a = dpflow(&args);
    let b = dpflow(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = dpflow(&["mechanism", "run", "--seed", "12"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn op_baseline_runs() {
    let v = json(&dpflow(&["mechanism", "op-baseline", "--protect", "1,2", "--seed", "3"]));
    assert!(v["policy"].is_null());
    assert_eq!(v["ledger"]["draws"], 1);
}

#[test]
fn timeseries_csv_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let out = dpflow(&[
        "validate",
        "timeseries",
        "--steps",
        "3",
        "--format",
        "csv",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,mean,lo3,hi3,sample,v_mean,v_sample"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"epsilon": 0.5, "units": "per-unit"}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = json(&dpflow(&["calibrate", "--config", c]));
    let from_flag = json(&dpflow(&["calibrate", "--config", c, "--epsilon", "1"]));
    assert_eq!(from_file["epsilon"], 0.5);
    assert_eq!(from_flag["epsilon"], 1.0);
    assert_eq!(from_file["units"], "per-unit");
    let (a, b) = (floats(&from_file["sigma"]), floats(&from_flag["sigma"]));
    assert!((a[0] / b[0] - 2.0).abs() < 1e-9);
}

#[test]
fn bad_config_key_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"epsilonn": 0.5}"#).unwrap();
    let out = dpflow(&["calibrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_program_exits_two() {
    let out = dpflow(&["solve-ccopf", "--beta-frac", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn domain_errors_exit_one() {
    assert_eq!(dpflow(&["calibrate", "--epsilon", "3"]).status.code(), Some(1));
    assert_eq!(dpflow(&["solve-dopf", "--case", "/nonexistent/case.json"]).status.code(), Some(1));
    assert_eq!(dpflow(&["solve-ccopf", "--variant", "cvar", "--theta", "1.5"]).status.code(), Some(1));
}

#[test]
fn case_file_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feeder.json");
    std::fs::write(&path, dpflow::grid::FEEDER15_JSON).unwrap();
    let a = json(&dpflow(&["solve-dopf", "--case", path.to_str().unwrap()]));
    let b = json(&dpflow(&["solve-dopf"]));
    assert_eq!(a, b);
}

#[test]
fn cvar_sweep_csv_parses() {
    let out = dpflow(&["validate", "cvar-sweep", "--thetas", "0,0.5", "--samples", "500", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<dpflow::validation::SweepRow> = dpflow::io::read_csv(&text).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].cost_std_analytic < rows[0].cost_std_analytic);
}
