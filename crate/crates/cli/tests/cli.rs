use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use loadgp::{Scenario, ScenarioSpec};
use loadgp_cli::csvio::{
    ingest, read_loads, read_market, write_covariates, write_loads, write_market, write_temperature, Inputs,
};
use loadgp_cli::CliError;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_loadgp"));
    c.env_remove("LOADGP_CONFIG");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn toy_loads(times: &[f64], days: &[i64]) -> String {
    let mut s = String::from("substation,day,time,load\n");
    for sub in ["north", "south"] {
        for d in days {
            for t in times {
                s += &format!("{sub},{d},{t},{}\n", 10.0 + t + *d as f64);
            }
        }
    }
    s
}

fn inputs(loads: PathBuf, market: PathBuf) -> Inputs {
    Inputs {
        loads,
        market,
        temperature: None,
        locations: None,
        covariates: None,
        horizon: 24.0,
    }
}

#[test]
fn ingests_toy_panel() {
    let dir = TempDir::new().unwrap();
    let loads = write(dir.path(), "loads.csv", &toy_loads(&[0.0, 6.0, 12.0, 18.0], &[1, 2]));
    let market = write(dir.path(), "market.csv", "substation,type,count\nnorth,res,10\nnorth,bus,2\nsouth,res,4\n");
    let (panel, market) = ingest(&inputs(loads, market)).unwrap();
    assert_eq!(panel.num_substations(), 2);
    assert_eq!(panel.num_days(), 2);
    assert_eq!(panel.grid().times(), &[0.0, 6.0, 12.0, 18.0]);
    assert_eq!(market.types(), &["res".to_string(), "bus".to_string()]);
    assert_eq!(market.counts(), &[vec![10, 2], vec![4, 0]]);
    assert_eq!(panel.load(1, 1)[2], 24.0);
}

fn ingest_error(loads: &str, market: &str) -> CliError {
    let dir = TempDir::new().unwrap();
    let l = write(dir.path(), "loads.csv", loads);
    let m = write(dir.path(), "market.csv", market);
    ingest(&inputs(l, m)).unwrap_err()
}

#[test]
fn labelled_ingest_errors() {
    let good = toy_loads(&[0.0, 12.0], &[1]);
    let market = "substation,type,count\nnorth,a,1\nsouth,a,2\n";
    let cases = [
        (good.replace("load\n", "kwh\n"), market.to_string(), "bad_header"),
        (good.replacen("north,1,12,", "north,1,,", 1), market.to_string(), "missing_cell"),
        (good.replacen("north,1,12,", "north,1,0,", 1), market.to_string(), "non_monotone_time"),
        (good.clone(), format!("{market}east,a,3\n"), "unknown_substation"),
        (good.clone(), "substation,type,count\nnorth,a,-1\nsouth,a,2\n".into(), "negative_count"),
        (good.clone(), "substation,type,count\nnorth,a,1\n".into(), "incomplete_data"),
        (good.replacen("north,1,12,", "north,1,noon,", 1), market.to_string(), "parse"),
        (toy_loads(&[0.0, 12.0], &[1]).replacen("south,1,12", "south,1,13", 1), market.to_string(), "incomplete_data"),
    ];
    for (loads, market, code) in cases {
        let e = ingest_error(&loads, &market);
        assert_eq!(e.code(), code, "{e}");
        assert_eq!(e.exit_code(), 1);
    }
}

#[test]
fn three_hourly_temperature_is_interpolated() {
    let dir = TempDir::new().unwrap();
    let times: Vec<f64> = (0..144).map(|k| k as f64 / 6.0).collect();
    let loads = write(dir.path(), "loads.csv", &toy_loads(&times, &[1, 2]));
    let market = write(dir.path(), "market.csv", "substation,type,count\nnorth,a,1\nsouth,a,2\n");
    // not-a-knot cubic interpolation reproduces a cubic exactly
    let cubic = |x: f64| 1e-4 * x.powi(3) - 0.01 * x * x + 0.2 * x + 3.0;
    let mut temp = String::from("location,day,time,temp\n");
    for d in 1..=2 {
        for k in 0..8 {
            let t = 3.0 * k as f64;
            temp += &format!("hill,{d},{t},{}\n", cubic((d - 1) as f64 * 24.0 + t));
        }
    }
    let temperature = write(dir.path(), "temperature.csv", &temp);
    let locations = write(dir.path(), "locations.csv", "substation,location\nnorth,hill\nsouth,hill\n");
    let (panel, _) = ingest(&Inputs {
        temperature: Some(temperature),
        locations: Some(locations),
        ..inputs(loads, market)
    })
    .unwrap();
    let curves = panel.temperature().unwrap();
    for j in 0..2 {
        for (i, day) in curves[j].iter().enumerate() {
            for (k, v) in day.iter().enumerate() {
                let x = (i as f64 * 24.0 + times[k]).min(45.0);
                assert!((v - cubic(x)).abs() < 1e-9, "day {i}, time {}: {v} vs {}", times[k], cubic(x));
            }
        }
    }
}

fn round_trip(id: u32) {
    let scenario = Scenario::new(ScenarioSpec::preset(id, 11).unwrap()).unwrap();
    let sim = scenario.generate(4).unwrap();
    let dir = TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_loads(&p("loads.csv"), &sim.panel).unwrap();
    write_market(&p("market.csv"), &sim.market).unwrap();
    let mut inp = inputs(p("loads.csv"), p("market.csv"));
    if sim.panel.temperature().is_some() {
        write_temperature(&p("temperature.csv"), &p("locations.csv"), &sim.panel, &sim.locations).unwrap();
        write_covariates(&p("covariates.csv"), &sim.panel).unwrap();
        inp.temperature = Some(p("temperature.csv"));
        inp.locations = Some(p("locations.csv"));
        inp.covariates = Some(p("covariates.csv"));
    }
    let (panel, market) = ingest(&inp).unwrap();
    assert_eq!(panel, sim.panel);
    assert_eq!(market, sim.market);
    assert_eq!(read_loads(&p("loads.csv"), 24.0).unwrap().loads(), sim.panel.loads());
    assert_eq!(read_market(&p("market.csv"), sim.panel.substations()).unwrap(), sim.market);
}

#[test]
fn simulated_panels_round_trip_exactly() {
    round_trip(1);
    round_trip(5);
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, scenario: u32, replicates: usize) -> PathBuf {
    let status = bin()
        .args(["--seed", "1", "--output-dir"])
        .arg(dir)
        .args(["simulate", "--scenario", &scenario.to_string(), "--replicates", &replicates.to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    dir.join(format!("scenario_{scenario}"))
}

fn data_args(rep: &Path, surface: bool) -> Vec<String> {
    let mut args = vec![
        "--loads".to_string(),
        rep.join("loads.csv").display().to_string(),
        "--market".into(),
        rep.join("market.csv").display().to_string(),
    ];
    if surface {
        for (flag, file) in [("--temperature", "temperature.csv"), ("--locations", "locations.csv"), ("--covariates", "covariates.csv")] {
            args.push(flag.into());
            args.push(rep.join(file).display().to_string());
        }
    }
    args
}

#[test]
fn fit_diagnose_and_compare() {
    let dir = TempDir::new().unwrap();
    let rep = simulate(dir.path(), 1, 1).join("replicate_000");
    for kind in ["homogeneous", "complete"] {
        let out = bin()
            .arg("--output-dir")
            .arg(dir.path().join(kind))
            .arg("fit")
            .args(data_args(&rep, true))
            .args(["--covariance", kind])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let h = json(&dir.path().join("homogeneous/fit.json"));
    assert_eq!(h["schema_version"], 1);
    assert_eq!(h["sigma"].as_array().unwrap().len(), 2);
    assert_eq!(h["omega"].as_array().unwrap().len(), 2);
    assert_eq!(h["gamma"][0]["name"], "dummy");
    assert!(h["converged"].is_boolean());

    let out = bin()
        .arg("--output-dir")
        .arg(dir.path())
        .arg("compare")
        .arg("--nested")
        .arg(dir.path().join("homogeneous/fit.json"))
        .arg("--larger")
        .arg(dir.path().join("complete/fit.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let c = json(&dir.path().join("comparison.json"));
    assert_eq!(c["df"], 10);
    assert!(c["p_value"].as_f64().unwrap() < 1e-3);

    let out = bin()
        .arg("--output-dir")
        .arg(dir.path().join("diag"))
        .arg("diagnose")
        .arg("--fit")
        .arg(dir.path().join("complete/fit.json"))
        .args(data_args(&rep, true))
        .arg("--residuals-csv")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = json(&dir.path().join("diag/diagnostics.json"));
    assert_eq!(d["fmsre"].as_array().unwrap().len(), 12);
    assert_eq!(d["types"].as_array().unwrap().len(), 2);
    assert_eq!(d["residual_median"].as_array().unwrap().len(), 48);
    let rows = fs::read_to_string(dir.path().join("diag/residuals.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 12 * 5 * 48);
}

#[test]
fn cluster_is_deterministic_and_recovers_truth() {
    let dir = TempDir::new().unwrap();
    let sc = simulate(dir.path(), 7, 3);
    for r in 0..3 {
        let rep = sc.join(format!("replicate_{r:03}"));
        let mut docs = Vec::new();
        for run in 0..2 {
            let out_dir = dir.path().join(format!("m{r}_{run}"));
            let status = bin()
                .args(["--seed", "7", "--output-dir"])
                .arg(&out_dir)
                .arg("cluster")
                .args(data_args(&rep, false))
                .args(["--clusters", "3", "--trials", "10", "--truth"])
                .arg(rep.join("truth.json"))
                .status()
                .unwrap();
            assert!(status.success());
            docs.push(fs::read_to_string(out_dir.join("mixture.json")).unwrap());
        }
        assert_eq!(docs[0], docs[1]);
        let m: Value = serde_json::from_str(&docs[0]).unwrap();
        assert_eq!(m["recovery"]["recovered"], true, "replicate {r}");
        for row in m["membership"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let rep = simulate(dir.path(), 7, 1).join("replicate_000");

    let out = bin()
        .arg("--output-dir")
        .arg(dir.path())
        .arg("cluster")
        .args(data_args(&rep, false))
        .args(["--clusters", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "identifiability");

    let out = bin()
        .arg("fit")
        .args(["--loads", "/nonexistent/loads.csv", "--market", "/nonexistent/market.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "io");

    // an iteration cap is a result, not an error
    let out = bin()
        .arg("--output-dir")
        .arg(dir.path().join("capped"))
        .arg("fit")
        .args(data_args(&rep, false))
        .args(["--max-iterations", "1", "--no-hessian"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("capped/fit.json"))["converged"], false);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = TempDir::new().unwrap();
    let rep = simulate(dir.path(), 5, 1).join("replicate_000");
    let cfg = write(dir.path(), "loadgp.toml", "[model]\ntime_basis = 8\nhessian = false\n");
    let status = bin()
        .env("LOADGP_CONFIG", &cfg)
        .arg("--output-dir")
        .arg(dir.path())
        .arg("fit")
        .args(data_args(&rep, false))
        .status()
        .unwrap();
    assert!(status.success());
    let f = json(&dir.path().join("fit.json"));
    assert_eq!(f["model"]["beta"].as_array().unwrap().len(), 16);
    assert!(f["model"]["covariance_hessian"].is_null());

    let bad = write(dir.path(), "bad.toml", "[model]\nbasis = 3\n");
    let out = bin()
        .env("LOADGP_CONFIG", &bad)
        .arg("--output-dir")
        .arg(dir.path())
        .arg("fit")
        .args(data_args(&rep, false))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "config");
}
