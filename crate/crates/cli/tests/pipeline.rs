// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::Command;

fn cyhmm(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cyhmm"))
        .current_dir(dir)
        .env_remove("CYHMM_THREADS")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "cyhmm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn assert_files(dir: &Path, names: &[&str]) {
    for n in names {
        assert!(dir.join(n).is_file(), "missing {}", dir.join(n).display());
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_fit_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    cyhmm(
        root,
        &[
            "simulate",
            "-o",
            "sim",
            "--n-individuals",
            "30",
            "--t-max",
            "90",
            "--kind",
            "binary",
            "--seed",
            "4",
        ],
    );
    assert_files(
        &root.join("sim"),
        &[
            "data.csv",
            "truth.csv",
            "truth_trajectories.csv",
            "run_manifest.json",
        ],
    );
    assert_eq!(
        manifest(&root.join("sim"))["config"]["simulation"]["seed"],
        4
    );

    let before = std::fs::read(root.join("sim/data.csv")).unwrap();
    cyhmm(
        root,
        &[
            "fit",
            "-i",
            "sim/data.csv",
            "--kind",
            "binary",
            "-o",
            "fit",
            "--n-states",
            "3",
            "--max-iters",
            "20",
        ],
    );
    assert_files(
        &root.join("fit"),
        &[
            "model.json",
            "loglik_trace.csv",
            "fit_summary.json",
            "run_manifest.json",
        ],
    );
    assert_eq!(before, std::fs::read(root.join("sim/data.csv")).unwrap());
    let m = manifest(&root.join("fit"));
    assert_eq!(m["config"]["fit"]["n_states"], 3);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    cyhmm(
        root,
        &[
            "analyze",
            "-i",
            "sim/data.csv",
            "-m",
            "fit/model.json",
            "-o",
            "analysis",
        ],
    );
    assert_files(
        &root.join("analysis"),
        &[
            "cycle_lengths.json",
            "cycle_lengths.csv",
            "trajectories.json",
            "trajectories.csv",
            "variability.csv",
        ],
    );
    let traj = std::fs::read_to_string(root.join("analysis/trajectories.csv")).unwrap();
    assert!(traj.starts_with("t,feature,expected_value"));
    assert!(traj.contains("no_features_logged"));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(
        root.join("run.json"),
        r#"{"simulation": {"n_individuals": 12, "t_max": 60, "n_features": 3}, "seed": 9}"#,
    )
    .unwrap();
    cyhmm(
        root,
        &[
            "--config", "run.json", "simulate", "-o", "sim", "--t-max", "70",
        ],
    );
    let m = manifest(&root.join("sim"));
    assert_eq!(m["config"]["simulation"]["n_individuals"], 12);
    assert_eq!(m["config"]["simulation"]["t_max"], 70);
    assert_eq!(m["config"]["simulation"]["seed"], 9);
    assert_eq!(m["inputs"][0]["path"], "run.json");

    std::fs::write(
        root.join("bad.json"),
        r#"{"simulation": {"n_individual": 3}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cyhmm"))
        .current_dir(root)
        .args(["--config", "bad.json", "simulate", "-o", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cyhmm"))
        .current_dir(tmp.path())
        .args(["fit", "-i", "nope.csv", "-o", "fit"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!tmp.path().join("fit/model.json").exists());
}

#[test]
fn thread_count_does_not_change_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    cyhmm(
        root,
        &[
            "simulate",
            "-o",
            "sim",
            "--n-individuals",
            "40",
            "--t-max",
            "90",
            "--seed",
            "2",
        ],
    );
    for threads in ["1", "8"] {
        cyhmm(
            root,
            &[
                "fit",
                "-i",
                "sim/data.csv",
                "-o",
                &format!("fit{threads}"),
                "--threads",
                threads,
                "--max-iters",
                "25",
            ],
        );
    }
    let a = cyhmm::CyhmmModel::from_json(
        &std::fs::read_to_string(root.join("fit1/model.json")).unwrap(),
    )
    .unwrap();
    let b = cyhmm::CyhmmModel::from_json(
        &std::fs::read_to_string(root.join("fit8/model.json")).unwrap(),
    )
    .unwrap();
    let (ja, jb): (serde_json::Value, serde_json::Value) = (
        serde_json::from_str(&a.to_json().unwrap()).unwrap(),
        serde_json::from_str(&b.to_json().unwrap()).unwrap(),
    );
    fn numbers(v: &serde_json::Value, out: &mut Vec<f64>) {
        match v {
            serde_json::Value::Number(n) => out.push(n.as_f64().unwrap()),
            serde_json::Value::Array(xs) => xs.iter().for_each(|x| numbers(x, out)),
            serde_json::Value::Object(m) => m.values().for_each(|x| numbers(x, out)),
            _ => {}
        }
    }
    let (mut na, mut nb) = (Vec::new(), Vec::new());
    numbers(&ja, &mut na);
    numbers(&jb, &mut nb);
    assert_eq!(na.len(), nb.len());
    for (x, y) in na.iter().zip(&nb) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
    assert_eq!(manifest(&root.join("fit8"))["threads"], 8);
}

#[test]
fn detrend_cluster_and_select_states() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    cyhmm(
        root,
        &[
            "simulate",
            "-o",
            "sim",
            "--n-individuals",
            "20",
            "--t-max",
            "80",
            "--n-features",
            "3",
        ],
    );
    cyhmm(
        root,
        &[
            "detrend",
            "-i",
            "sim/data.csv",
            "--window",
            "61",
            "-o",
            "dt",
        ],
    );
    assert_files(&root.join("dt"), &["detrended.csv"]);
    cyhmm(
        root,
        &[
            "cluster",
            "-i",
            "sim/data.csv",
            "-c",
            "2",
            "--n-seed-models",
            "4",
            "--n-states",
            "2",
            "--max-iters",
            "10",
            "--candidates",
            "1,2",
            "-o",
            "cl",
        ],
    );
    assert_files(
        &root.join("cl"),
        &[
            "assignment.csv",
            "cluster_0_model.json",
            "cluster_1_model.json",
            "cluster_summary.csv",
            "cluster_trace.csv",
            "cluster_counts.csv",
        ],
    );
    let assign = std::fs::read_to_string(root.join("cl/assignment.csv")).unwrap();
    assert_eq!(assign.lines().count(), 21);
    let out = cyhmm(
        root,
        &[
            "select-states",
            "-i",
            "sim/data.csv",
            "--candidates",
            "1,2",
            "--folds",
            "2",
            "--max-iters",
            "10",
            "-o",
            "sel",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("selected n_states"));
    assert_files(
        &root.join("sel"),
        &["state_selection.csv", "state_selection.json"],
    );
}

#[test]
fn tiny_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    cyhmm(
        root,
        &[
            "benchmark",
            "--binary-trials",
            "1",
            "--continuous-trials",
            "1",
            "--n-individuals",
            "10",
            "--methods",
            "oracle,autocorrelation,fourier,partial_periodicity_d2",
            "-o",
            "bench",
        ],
    );
    assert_files(
        &root.join("bench"),
        &[
            "error_table.csv",
            "error_table.json",
            "error_table_binary.csv",
            "estimates.csv",
            "trials.json",
        ],
    );
    let table = std::fs::read_to_string(root.join("bench/error_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("oracle,20,0,0.0000"));
}
