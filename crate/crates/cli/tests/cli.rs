use std::path::PathBuf;
use std::process::Command;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn useq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_useq")).args(args).output().expect("binary runs")
}

#[test]
fn product_run_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("c02_product_formula.toml");
    let mut outputs = Vec::new();
    for (sub, workers) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(sub);
        let res = useq(&["product", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        outputs.push(out);
    }
    for f in ["report.json", "cov.csv", "checks.csv", "paths.csv", "rates.csv", "ecdf.csv"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(outputs[1].join(f)).unwrap(), "{f} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(outputs[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(report["module_versions"]["product_formula"].is_string());
    let checks = std::fs::read_to_string(outputs[0].join("checks.csv")).unwrap();
    assert!(checks.starts_with("check_id,n,value\n"));
}

#[test]
fn failing_gate_gives_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("c11_edge_changepoint.toml");
    let res = useq(&["changepoint", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--workers", "1"]);
    assert_eq!(res.status.code(), Some(1));
    let cov = std::fs::read_to_string(dir.path().join("cov.csv")).unwrap();
    assert!(cov.starts_with("s,t,empirical,target,se\n"));
    let paths = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert!(paths.starts_with("replicate,t,value\n") && paths.lines().count() > 500);
}

#[test]
fn scenario_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("c02_product_formula.toml");
    let res = useq(&["rgg", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("`product`"));
}

#[test]
fn invalid_config_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "scenario = \"diag_dominant\"\nreplicates = 5\ncolour = 1\n").unwrap();
    let res = useq(&["diag", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    for needle in ["seed", "colour", "diag", "replicates", "n:"] {
        assert!(err.contains(needle), "{needle} missing from: {err}");
    }
}
