use rflab::lab::{Check, ExperimentReport};
use rflab::output::{write_outputs, ScenarioOutcome, CSV_HEADER};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

fn rflab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rflab")).args(args).output().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn ricci_validate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let t = Instant::now();
    let res = rflab(&["run", "ricci-validate", "--out", out.to_str().unwrap()]);
    assert!(t.elapsed() < Duration::from_secs(10));
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["results.csv", "summary.json", "resolved.config"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let s = summary(&out);
    assert_eq!(s["passed"], true);
    assert_eq!(s["scenarios"][0]["scenario"], "ricci-validate");

    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));

    // the resolved config is itself a valid config
    let text = std::fs::read_to_string(out.join("resolved.config")).unwrap();
    let cfg = rflab::config::parse_config(&text).unwrap();
    assert_eq!(cfg.scenario.name(), "ricci-validate");
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.config");
    std::fs::write(&path, "[sphere]\nT = 1.0\ndelta = 2.0\n").unwrap();
    let res = rflab(&["run", "ricci-validate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 3") && err.contains("delta"), "{err}");
    assert!(!dir.path().join("summary.json").exists());

    let res = rflab(&["run", "no-such-scenario"]);
    assert_eq!(res.status.code(), Some(2));
    let res = rflab(&["run", "ricci-validate", "--step", "-1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn torus_scalar_convergence_rows_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scalar");
    let res = rflab(&[
        "run",
        "scalar-convergence",
        "--background",
        "torus",
        "--paths",
        "2000",
        "--N-list",
        "100,1000",
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    let code = res.status.code().unwrap();
    assert!(code == 0 || code == 1, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(summary(&out)["passed"] == true, code == 0);

    let mut rd = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    for n in ["100", "1000"] {
        for obs in ["t_mean", "t_var"] {
            let r = rows
                .iter()
                .find(|r| &r[0] == "scalar-convergence" && &r[1] == "torus" && &r[2] == n && &r[6] == obs)
                .unwrap_or_else(|| panic!("no {obs} row for N = {n}"));
            assert_eq!(&r[4], "2000");
            assert!(!r[9].is_empty(), "{obs} at N = {n} has no oracle");
            assert!(r[10].parse::<f64>().unwrap() >= 0.0);
        }
    }
    assert!(rows.iter().all(|r| &r[1] == "torus"));
    let text = std::fs::read_to_string(out.join("resolved.config")).unwrap();
    assert!(text.contains("N_list = 100,1000"), "{text}");
    assert!(text.contains("seed = 11"));
}

#[test]
fn rerun_replaces_outputs_and_dump_writes_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    std::fs::write(dir.path().join("results.csv"), "stale").unwrap();
    for _ in 0..2 {
        let res = rflab(&[
            "run",
            "scalar-convergence",
            "--out",
            out,
            "--dump-ensemble",
            "--paths",
            "200",
            "--N-list",
            "100",
            "--background",
            "torus",
        ]);
        assert!(matches!(res.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.ends_with(".tmp")), "{names:?}");
    assert!(names.iter().any(|n| n == "ensemble_perelman_N100_torus.csv"), "{names:?}");
    assert!(names.iter().any(|n| n == "ensemble_parabolic_torus.csv"));
    assert!(std::fs::read_to_string(dir.path().join("results.csv")).unwrap().starts_with("scenario,"));
}

fn check(name: &str, pass: bool, value: f64) -> Check {
    Check { name: name.into(), pass, value, threshold: String::new(), detail: String::new() }
}

#[test]
fn outputs_group_scenarios_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = ExperimentReport::named("ricci-validate", "sphere");
    a.checks.push(check("residual", true, 1e-12));
    let mut b = ExperimentReport::named("operator-check", "torus");
    b.checks.push(check("slope", false, -0.2));
    let outcomes = vec![
        ScenarioOutcome { scenario: "ricci-validate".into(), runtime_s: 0.1, reports: vec![a], error: None },
        ScenarioOutcome { scenario: "operator-check".into(), runtime_s: 0.2, reports: vec![b], error: None },
        ScenarioOutcome { scenario: "gradient-estimate".into(), runtime_s: 0.0, reports: vec![], error: Some("boom".into()) },
    ];
    let written = write_outputs(&outcomes, "[run]\n", dir.path()).unwrap();
    assert_eq!(written.len(), 3);
    let s = summary(dir.path());
    assert_eq!(s["passed"], false);
    let sc = s["scenarios"].as_array().unwrap();
    let names: Vec<&str> = sc.iter().map(|v| v["scenario"].as_str().unwrap()).collect();
    assert_eq!(names, ["ricci-validate", "operator-check", "gradient-estimate"]);
    assert_eq!(sc[0]["passed"], true);
    assert_eq!(sc[1]["passed"], false);
    assert_eq!(sc[2]["error"], "boom");
    assert_eq!(sc[1]["experiments"][0]["checks"][0]["name"], "slope");
}
