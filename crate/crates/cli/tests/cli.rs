use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::process::{Command, Output};

fn bcq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcq")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sha256(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn certify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());

    let ok = bcq(&["certify", "--out", &out]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report = json(&dir.path().join("condition_report.json"));
    assert_eq!(report["data"]["passed"], Value::Bool(true));
    assert_eq!(report["config"]["a"].as_f64(), Some(2.0));

    let fail = bcq(&["certify", "--a", "1.7549", "--horizon", "10", "--out", &out]);
    assert_eq!(code(&fail), 1);
    let report = json(&dir.path().join("condition_report.json"));
    assert_eq!(report["data"]["passed"], Value::Bool(false));

    let bad = bcq(&["certify", "--a", "2.5", "--out", &out]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("domain"));
}

#[test]
fn missing_upstream_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcq(&["pipeline", "--stages", "spectrum", "--out", &out_arg(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = bcq(&["pipeline", "--stages", "warp", "--out", &out_arg(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_report_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bcq(&["report", &out_arg(dir.path())])), 2);
    assert_eq!(code(&bcq(&["report", &out_arg(&dir.path().join("nowhere"))])), 2);
}

#[test]
fn bad_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "warp_factor = 9\n").unwrap();
    assert_eq!(code(&bcq(&["certify", "--config", conf.to_str().unwrap()])), 2);
    std::fs::write(&conf, "a = two\n").unwrap();
    assert_eq!(code(&bcq(&["certify", "--config", conf.to_str().unwrap()])), 2);
}

#[test]
fn partial_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# short run\nhorizon_induce = 30\nseed = 99\nobs = x; x2\n").unwrap();
    let conf = conf.to_str().unwrap();

    let o = bcq(&["pipeline", "--config", conf, "--stages", "induce,partition", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["delta_table.json", "delta_table.csv", "partition.json", "induced_system.json", "tail.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("spectrum.csv").exists());

    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["config"]["horizon_induce"].as_u64(), Some(30));
    assert_eq!(manifest["config"]["seed"].as_u64(), Some(99));
    assert_eq!(manifest["config"]["observables"], serde_json::json!(["x", "x2"]));
    let files = manifest["files"].as_object().unwrap();
    assert!(files.contains_key("partition.json") && files.contains_key("tail.csv"));
    for (name, entry) in files {
        assert_eq!(entry["sha256"].as_str().unwrap(), sha256(&dir.path().join(name)), "{name}");
    }
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["partition", "induce"]);

    let csv = std::fs::read_to_string(dir.path().join("delta_table.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("p,delta"));
    assert_eq!(csv.lines().count(), 31);

    let r = bcq(&["report", &out]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    assert!(text.contains("[stage missing] spectrum"));
    assert!(text.contains("[stage missing] ldp"));
    assert!(!text.contains("[stage missing] induce"));
    assert!(dir.path().join("summary.txt").exists());
    let report = json(&dir.path().join("report.json"));
    assert!(report["checks"].as_array().unwrap().iter().any(|c| c["name"] == "induced coverage ≥ 0.99"));

    // a tampered upstream artifact is refused
    let part = dir.path().join("partition.json");
    let text = std::fs::read_to_string(&part).unwrap();
    std::fs::write(&part, text.replacen("\"delta\"", "\"delta\" ", 1)).unwrap();
    let o = bcq(&["pipeline", "--config", conf, "--stages", "induce", "--out", &out]);
    assert_eq!(code(&o), 2);

    // and so is one produced under a different configuration
    let o = bcq(&["pipeline", "--config", conf, "--stages", "partition", "--out", &out]);
    assert_eq!(code(&o), 0);
    let o = bcq(&["pipeline", "--config", conf, "--epsilon", "0.03", "--stages", "induce", "--out", &out]);
    assert_eq!(code(&o), 2);
}
