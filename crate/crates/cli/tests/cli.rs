use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgmlmoe"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .arg("--quiet")
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "simulate", "--n", "1000", "--out", "a.csv"]);
    ok(d, &["--seed", "3", "simulate", "--n", "1000", "--out", "b.csv"]);
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1001);
    let labels: std::collections::BTreeSet<&str> =
        text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec!["1", "2"]);
    let manifest = json(&d.join("run.json"));
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["config"]["command"]["subcommand"], "simulate");
}

#[test]
fn empty_simulation_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--n", "0"]);
    assert_eq!(fs::read_to_string(dir.path().join("data.csv")).unwrap(), "x1,y\n");
}

#[test]
fn fit_dendrogram_and_select_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "1", "simulate", "--n", "400"]);
    let data = d.join("data.csv");
    let data = data.to_str().unwrap();
    ok(d, &["--seed", "2", "fit", "--data", data, "--k", "3", "--max-iters", "200"]);
    let trace = json(&d.join("trace.json"));
    let ll: Vec<f64> = trace["loglik"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    assert!(trace["converged"].is_boolean());

    let measure = d.join("measure.json");
    ok(d, &["dendrogram", "--measure", measure.to_str().unwrap(), "--data", data]);
    let csv = fs::read_to_string(d.join("dendrogram.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,merged_i,merged_j,height"));
    assert_eq!(lines.count(), 2);
    let chain = json(&d.join("chain.json"));
    let back: sgmlmoe::MergeChain = serde_json::from_value(chain).unwrap();
    assert_eq!(back.heights.len(), 2);

    ok(d, &["select", "dsc", "--data", data, "--measure", measure.to_str().unwrap()]);
    let report = json(&d.join("selection.json"));
    assert_eq!(report["criterion"], "dsc");
    assert_eq!(report["candidates"], serde_json::json!([2, 3]));
}

#[test]
fn init_file_round_trips_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "200"]);
    let data = d.join("data.csv");
    let data = data.to_str().unwrap();
    ok(d, &["fit", "--data", data, "--k", "2", "--max-iters", "20"]);
    let model = d.join("model.json");
    ok(d, &["fit", "--data", data, "--k", "2", "--init", "file", "--init-file", model.to_str().unwrap(), "--max-iters", "1", "--prefix", "again_"]);
    let first: sgmlmoe::Theta = serde_json::from_value(json(&model)).unwrap();
    let trace = json(&d.join("again_trace.json"));
    let start = trace["loglik"][0].as_f64().unwrap();
    let rows = sgmlmoe::io::read_dataset_csv(Path::new(data), None).unwrap().data;
    let expected = sgmlmoe::log_likelihood(&first, &rows).unwrap();
    assert!((start - expected).abs() < 1e-9 * expected.abs());
}

#[test]
fn sweep_criteria_and_singleton_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "300"]);
    let data = d.join("data.csv");
    let data = data.to_str().unwrap();
    ok(d, &["select", "bic", "--data", data, "--k-max", "3", "--max-iters", "50"]);
    let report = json(&d.join("selection.json"));
    assert_eq!(report["candidates"], serde_json::json!([1, 2, 3]));

    let sweep = d.join("one");
    fs::create_dir(&sweep).unwrap();
    fs::copy(d.join("model_k2.json"), sweep.join("model_k2.json")).unwrap();
    ok(d, &["select", "aic", "--data", data, "--sweep-dir", sweep.to_str().unwrap()]);
    assert_eq!(json(&d.join("selection.json"))["chosen_k"], 2);
}

#[test]
fn replicate_mode_writes_rows_per_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["select", "dsc", "--replicate", "3", "--n", "150", "--k-fit", "3", "--max-iters", "30", "--tol", "1e-3"]);
    let csv = fs::read_to_string(d.join("selection_replicates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    for c in ["dsc", "aic", "bic", "icl"] {
        assert_eq!(csv.lines().filter(|l| l.starts_with(&format!("{c},"))).count(), 3);
    }
}

#[test]
fn benchmark_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "benchmark", "--n", "300", "--budget", "5"]);
    let csv = fs::read_to_string(d.join("benchmark.csv")).unwrap();
    let mm: Vec<f64> = csv
        .lines()
        .filter(|l| l.starts_with("mm,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(mm.len() >= 2 && mm.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    assert_eq!(csv.lines().filter(|l| l.starts_with("grad,")).count(), 6);
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(',')));

    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &["--seed", "4", "benchmark", "--n", "300", "--budget", "5"]);
    assert_eq!(csv, fs::read_to_string(again.path().join("benchmark.csv")).unwrap());

    ok(d, &["benchmark", "--n", "50", "--budget", "1", "--optimizers", "grad"]);
    let csv = fs::read_to_string(d.join("benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn rates_from_toml_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("rates.toml");
    fs::write(
        &cfg,
        "k_fit = 2\nlog10_n = [2.0, 2.3, 2.6]\nseeds = 2\n[init]\nscheme = \"perturbed_truth\"\nnoise = 0.1\n[fit]\nmax_iters = 30\nridge = 1e-8\n",
    )
    .unwrap();
    ok(d, &["rates", "--config", cfg.to_str().unwrap()]);
    let csv = fs::read_to_string(d.join("rates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let slopes = json(&d.join("slopes.json"));
    assert!(slopes["d_v"]["slope"].is_number());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Usage errors.
    assert_eq!(run(d, &["fit"]).status.code(), Some(2));
    assert_eq!(run(d, &["select", "dsc"]).status.code(), Some(2));
    // Missing input file.
    let missing = run(d, &["fit", "--data", "/nonexistent/x.csv", "--k", "2"]);
    assert_eq!(missing.status.code(), Some(3));
    // Labels outside 1..=M.
    let bad = d.join("bad.csv");
    fs::write(&bad, "x1,y\n0.1,1\n0.2,3\n").unwrap();
    let out = run(d, &["fit", "--data", bad.to_str().unwrap(), "--m", "2", "--k", "2"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));
    // A single-atom measure cannot be merged.
    let csv = d.join("ok.csv");
    fs::write(&csv, "x1,y\n0.1,1\n0.2,2\n0.3,1\n").unwrap();
    ok(d, &["fit", "--data", csv.to_str().unwrap(), "--k", "1", "--max-iters", "3"]);
    let out = run(d, &["dendrogram", "--measure", d.join("measure.json").to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn string_labels_are_mapped_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = d.join("s.csv");
    let mut text = String::from("x1,y\n");
    for i in 0..40 {
        let x = i as f64 / 10.0 - 2.0;
        text.push_str(&format!("{x},{}\n", if (i * 7) % 3 == 0 { "cat" } else { "dog" }));
    }
    fs::write(&csv, text).unwrap();
    ok(d, &["fit", "--data", csv.to_str().unwrap(), "--k", "2", "--max-iters", "10", "--standardize"]);
    let manifest = json(&d.join("run.json"));
    assert_eq!(manifest["extra"]["label_map"]["dog"], 2);
    assert!(manifest["extra"]["standardization"].is_array());
}
