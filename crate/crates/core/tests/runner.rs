use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use phononflux::runner::{run_experiment, ExperimentConfig, Task};
use phononflux::Error;

fn config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "model": {{"type": "elastic", "d": 1, "m": 1.0}},
            "grid": {{"N": 256}},
            "ensemble": {{"M": 200, "master_seed": 9}},
            "temperatures": {{"T_plus": 2.0, "T_minus": 1.0}},
            "times": [3.0, 6.0],
            "test_function": {{"theta0": [2.1602], "width": 0.96}},
            "observables": ["dispersion", "check", "evolve", "covariance", "limit-cov", "current", "second-law", "decay"],
            "covariance": {{"window": 1, "methods": ["mc", "exact"]}},
            "output": {{"dir": {:?}}}
        }}"#,
        dir.to_str().unwrap()
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn run_in_pool(cfg: &ExperimentConfig, threads: usize) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg).unwrap());
}

#[test]
fn output_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|s| tmp.path().join(s)).collect();
    run_in_pool(&config(&dirs[0]), 4);
    run_in_pool(&config(&dirs[1]), 4);
    run_in_pool(&config(&dirs[2]), 1);
    let a = csv_files(&dirs[0]);
    assert_eq!(a.len(), 7, "{:?}", a.keys());
    assert_eq!(a, csv_files(&dirs[1]));
    assert_eq!(a, csv_files(&dirs[2]));
}

#[test]
fn manifest_records_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let report = run_experiment(&cfg).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"], cfg.hash());
    assert_eq!(manifest["master_seed"], 9);
    assert_eq!(manifest["samples"], 200);
    assert!(manifest["horizon"].as_f64().unwrap() > 6.0);
    let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    assert!(names.contains(&"second-law"), "{names:?}");
    assert!(report.checks.iter().find(|c| c.name == "second-law").unwrap().pass);
}

#[test]
fn dispersion_table_has_one_row_per_node() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.observables = vec![Task::Dispersion];
    cfg.grid.n = 64;
    run_experiment(&cfg).unwrap();
    let mut rdr = csv::Reader::from_path(tmp.path().join("dispersion.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "theta_1");
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 64);
    let omega: f64 = rows[16][headers.iter().position(|h| h == "omega").unwrap()].parse().unwrap();
    assert!((omega - 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn empty_observables_write_only_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.observables.clear();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.files, vec!["manifest.json".to_string()]);
    let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["manifest.json"]);
}

#[test]
fn failing_task_does_not_stop_the_others() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.observables = vec![Task::Dispersion, Task::Decay];
    cfg.test_function.as_mut().unwrap().theta0 = vec![0.0];
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.errors.len(), 1);
    assert_eq!(report.errors[0].task, "decay");
    assert!(tmp.path().join("dispersion.csv").exists());
    assert!(!tmp.path().join("decay.csv").exists());
}

#[test]
fn config_errors_point_at_the_field() {
    let cases = [
        (r#"{"model": {"type": "elastic", "d": 1, "m": 1.0}, "grid": {"N": "x"}}"#, "/grid/N"),
        (r#"{"model": {"type": "elastic", "d": 1, "m": 1.0}, "grid": {"N": 64}, "ensemble": {"M": 0}}"#, "/ensemble/M"),
        (
            r#"{"model": {"type": "elastic", "d": 1, "m": 1.0}, "grid": {"N": 64}, "observables": ["dispersion", "nope"]}"#,
            "/observables/1",
        ),
    ];
    for (text, pointer) in cases {
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { pointer: p, .. }) => assert_eq!(p, pointer, "{text}"),
            other => panic!("expected a config error for {text}, got {other:?}"),
        }
    }
}
