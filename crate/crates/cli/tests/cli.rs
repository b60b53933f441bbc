use std::path::Path;
use std::process::{Command, Output};

fn dpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpm")).args(args).args(["--output-dir", dir.to_str().unwrap()]).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Data lines of a CSV written by the binary (hash line and header dropped).
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    lines.skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn hash_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn gen_data_writes_csv_and_sidecar() {
    let d = tempfile::tempdir().unwrap();
    let out = dpm(d.path(), &["gen-data", "--n", "37", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(d.path().join("dataset.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("x1,x2,y1,y2"));
    assert_eq!(rows(&d.path().join("dataset.csv")).len(), 37);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("dataset.json")).unwrap()).unwrap();
    assert_eq!(meta, serde_json::json!({"n": 37, "tau": 0.2, "seed": 4}));
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&dpm(d.path(), &["gen-data", "--n", "0", "--seed", "1"])), 2);
    assert_eq!(code(&dpm(d.path(), &["gen-data", "--n", "5"])), 2);
    assert_eq!(code(&dpm(d.path(), &["gen-data", "--n", "5", "--seed", "1", "--tau", "0"])), 2);
    assert_eq!(code(&dpm(d.path(), &["gen-error-sweep", "--seed", "1", "--n-list", "100,50"])), 2);
    assert_eq!(code(&dpm(d.path(), &["train-nuclr", "--seed", "1", "--batch-size", "1"])), 2);
    assert_eq!(code(&dpm(d.path(), &["variance-study", "--seed", "1", "--schemes", "bogus"])), 2);

    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n": 5, "seed": 1, "colour": "red"}"#).unwrap();
    assert_eq!(code(&dpm(d.path(), &["gen-data", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn config_file_overrides_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n": 12, "seed": 9, "name": "from_config"}"#).unwrap();
    let out = dpm(d.path(), &["gen-data", "--n", "50", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(rows(&d.path().join("from_config.csv")).len(), 12);

    // Same resolved configuration through flags alone: same bytes.
    let e = tempfile::tempdir().unwrap();
    dpm(e.path(), &["gen-data", "--n", "12", "--seed", "9", "--name", "from_config"]);
    assert_eq!(
        std::fs::read(d.path().join("from_config.csv")).unwrap(),
        std::fs::read(e.path().join("from_config.csv")).unwrap()
    );
}

#[test]
fn config_hash_tracks_configuration() {
    let d = tempfile::tempdir().unwrap();
    dpm(d.path(), &["gen-data", "--n", "10", "--seed", "1", "--name", "a"]);
    dpm(d.path(), &["gen-data", "--n", "10", "--seed", "2", "--name", "a2"]);
    let e = tempfile::tempdir().unwrap();
    dpm(e.path(), &["gen-data", "--n", "10", "--seed", "1", "--name", "a"]);
    let (a, a2, other_dir) = (hash_line(&d.path().join("a.csv")), hash_line(&d.path().join("a2.csv")), hash_line(&e.path().join("a.csv")));
    assert_ne!(a, a2);
    assert_eq!(a, other_dir);
}

#[test]
fn solve_popularity_outputs_and_non_convergence() {
    let d = tempfile::tempdir().unwrap();
    dpm(d.path(), &["gen-data", "--n", "100", "--seed", "3"]);
    let data = d.path().join("dataset.csv");
    let out = dpm(d.path(), &["solve-popularity", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sol = rows(&d.path().join("solution.csv"));
    assert_eq!(sol.len(), 100);
    assert_eq!(sol[0][0], "0");
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(meta["converged"], true);
    assert!(meta["fixed_point_residual"].as_f64().unwrap() < 1e-6);
    assert!(meta["pearson_vs_true"].as_f64().unwrap() > 0.9);

    let out = dpm(d.path(), &["solve-popularity", "--data", data.to_str().unwrap(), "--max-iter", "1", "--name", "short"]);
    assert_eq!(code(&out), 3);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("short.json")).unwrap()).unwrap();
    assert_eq!(meta["converged"], false);
}

#[test]
fn constant_similarity_gives_uniform_popularity() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("flat.csv");
    std::fs::write(&data, "x1,x2,y1,y2\n0,0,0.1,0.2\n0,0,0.5,0.5\n0,0,0.9,0.3\n0,0,0.7,0.8\n").unwrap();
    let out = dpm(d.path(), &["solve-popularity", "--data", data.to_str().unwrap(), "--tau", "0.2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let q: Vec<f64> = rows(&d.path().join("solution.csv")).iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(q.iter().all(|&v| (v - q[0]).abs() < 1e-14));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("solution.json")).unwrap()).unwrap();
    assert!(meta["fixed_point_residual"].as_f64().unwrap() < 1e-14);
}

#[test]
fn sweeps_emit_one_row_per_cell() {
    let d = tempfile::tempdir().unwrap();
    let common = ["--seed", "2", "--n-list", "20,40,80", "--repeats", "2", "--n-true-risk", "500"];
    assert_eq!(code(&dpm(d.path(), &[&["gen-error-sweep"][..], &common].concat())), 0);
    let g = rows(&d.path().join("gen_error.csv"));
    assert_eq!(g.len(), 3 * 2 * 3);
    // Sorted by (n, repeat, method).
    let keys: Vec<(usize, usize, String)> = g.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(&keys[..3].iter().map(|k| k.2.as_str()).collect::<Vec<_>>(), &["gcl", "mle_exact", "ours"]);

    assert_eq!(code(&dpm(d.path(), &["error-term-sweep", "--seed", "2", "--n-list", "20,40,80", "--repeats", "2"])), 0);
    let e = rows(&d.path().join("error_term.csv"));
    assert_eq!(e.len(), 18);
    assert!(e.iter().filter(|r| r[2] == "exact").all(|r| r[3].parse::<f64>().unwrap() == 0.0));

    assert_eq!(code(&dpm(d.path(), &["variance-study", "--seed", "2", "--repeats", "50", "--grid", "4x1,4x2"])), 0);
    assert_eq!(rows(&d.path().join("variance.csv")).len(), 3 * 2);
}

#[test]
fn train_nuclr_writes_metrics_and_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = dpm(d.path(), &["train-nuclr", "--seed", "1", "--n-train", "128", "--n-eval", "32", "--epochs", "4", "--batch-size", "16"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = rows(&d.path().join("nuclr_metrics.csv"));
    assert_eq!(m.len(), 4);
    assert_eq!(m.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1", "2", "3"]);
    let text = std::fs::read_to_string(d.path().join("nuclr_checkpoint.json")).unwrap();
    assert!(dpm_core::model::SimilarityModel::<f64>::from_checkpoint_json(&text).is_ok());
    let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("nuclr_state.json")).unwrap()).unwrap();
    assert_eq!(state["step"], 4 * 8);
    assert_eq!(state["tracks"][0]["zeta"].as_array().unwrap().len(), 128);
}
