use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;
use tlrda::sample::compute_moments;
use tlrda::simgen::{simulate, CovKind, RhoSpec, SimConfig};
use tlrda_cli::io::{read_population, Manifest};

fn tlrda(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tlrda"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn run_ok(args: &[&str]) {
    let (code, stderr) = tlrda(args);
    assert_eq!(code, 0, "tlrda {args:?} failed: {stderr}");
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn small_sim(seed: u64) -> Value {
    json!({
        "p": 40,
        "n": [120, 100, 80],
        "alpha_sq": [1.0, 1.0, 1.0],
        "rho": 0.7,
        "n_test": 400,
        "stratified": true,
        "seed": seed
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn simulate_writes_the_validation_layout() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    run_ok(&["simulate", "--seed", "3", "--out", p(&out)]);
    let manifest = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.populations.len(), 6);
    for (i, entry) in manifest.populations.iter().enumerate() {
        assert_eq!(csv_rows(&out.join(&entry.file)), 150 - 10 * i);
        assert_eq!(entry.target, i == 5);
    }
    assert_eq!(csv_rows(&out.join("test.csv")), 2000);
    let header = fs::read_to_string(out.join("population_1.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("f1,f2,"));
    assert!(header.ends_with(",f150,label"));
}

#[test]
fn simulate_is_repeatable_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &small_sim(11));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["simulate", "--config", p(&cfg), "--out", p(&a)]);
    run_ok(&["simulate", "--config", p(&cfg), "--out", p(&b)]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn simulate_without_test_rows_skips_the_test_file() {
    let tmp = TempDir::new().unwrap();
    let mut sim = small_sim(1);
    sim["n_test"] = json!(0);
    let cfg = write_config(tmp.path(), "sim.json", &sim);
    let out = tmp.path().join("d");
    run_ok(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert!(!out.join("test.csv").exists());
    let manifest = Manifest::read(&out.join("manifest.json")).unwrap();
    assert!(manifest.test.is_none());
    assert!(manifest.notes.iter().any(|n| n.contains("no test file")));
}

#[test]
fn simulated_files_reproduce_in_memory_moments() {
    let tmp = TempDir::new().unwrap();
    let cfg = SimConfig {
        p: 30,
        n: vec![90, 70],
        alpha_sq: vec![0.8, 1.2],
        rho: RhoSpec::Common(0.4),
        cov_kind: CovKind::Ar1Toeplitz { t: 0.5 },
        n_test: 0,
        seed: 21,
        ..SimConfig::validation_preset()
    };
    let path = tmp.path().join("sim.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("d");
    run_ok(&["simulate", "--config", p(&path), "--out", p(&out)]);

    let data = simulate(&cfg).unwrap();
    for sample in &data.train {
        let id = sample.population_id();
        let read = read_population(&out.join(format!("population_{id}.csv")), id).unwrap();
        let (a, b) = (compute_moments(sample).unwrap(), compute_moments(&read).unwrap());
        assert!((a.sigma_hat() - b.sigma_hat()).amax() <= 1e-12);
        assert!((&a.means.mu_plus - &b.means.mu_plus).amax() <= 1e-12);
        assert!((&a.means.mu_minus - &b.means.mu_minus).amax() <= 1e-12);
    }
}

/// With the simulation's own hyperparameters, the plug-in limiting error of the
/// cross-validated P_ind fit matches the held-out error on average over seeds.
#[test]
fn fitted_limiting_error_tracks_held_out_error() {
    let tmp = TempDir::new().unwrap();
    let rho: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.5 }).collect()).collect();
    let mut gaps = Vec::new();
    for seed in 5..11 {
        let data = tmp.path().join(format!("d{seed}"));
        run_ok(&["simulate", "--seed", &seed.to_string(), "--out", p(&data)]);
        let fit = json!({
            "manifest": data.join("manifest.json"),
            "variants": ["P_ind"],
            "hyper": {"alpha_sq": vec![0.5; 6], "rho": rho}
        });
        let cfg = write_config(tmp.path(), "fit.json", &fit);
        let out = tmp.path().join(format!("f{seed}"));
        run_ok(&["fit", "--config", p(&cfg), "--lambda-grid", "0.3:10:12", "--out", p(&out)]);
        let report = read_report(&out);
        let risk = &report["risk"]["P_ind"]["selected"];
        gaps.push(risk["limiting_error"].as_f64().unwrap() - risk["empirical_error"].as_f64().unwrap());
        assert_eq!(report["schema_version"], 1);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean.abs() < 0.02, "mean gap {mean}, per seed {gaps:?}");
}

#[test]
fn estimated_hyperparameters_are_reported() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(12));
    let out = tmp.path().join("fit");
    run_ok(&["fit", "--manifest", p(&manifest), "--lambda-grid", "0.5:5:4", "--out", p(&out)]);
    let report = read_report(&out);
    assert_eq!(report["hyperparams"]["provenance"], "estimated");
    assert_eq!(report["hyperparams"]["rho"].as_array().unwrap().len(), 3);
    let empirical = report["risk"]["P_ind"]["selected"]["empirical_error"].as_f64().unwrap();
    assert!(empirical < 0.5);
}

fn simulate_small(tmp: &Path, sim: &Value) -> PathBuf {
    let cfg = write_config(tmp, "sim.json", sim);
    let out = tmp.join("d");
    run_ok(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    out.join("manifest.json")
}

#[test]
fn cross_validation_picks_the_first_grid_minimum() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(2));
    let out = tmp.path().join("fit");
    run_ok(&["fit", "--manifest", p(&manifest), "--lambda-grid", "0.3:10:8", "--folds", "4", "--out", p(&out)]);
    let cv = &read_report(&out)["risk"]["P_ind"]["cross_validation"];
    let grid: Vec<f64> = serde_json::from_value(cv["grid"].clone()).unwrap();
    let errors: Vec<f64> = serde_json::from_value(cv["mean_error"].clone()).unwrap();
    let selected = cv["selected"].as_f64().unwrap();
    let best = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = errors.iter().position(|&e| e == best).unwrap();
    assert_eq!(selected, grid[first]);
    assert_eq!(cv["folds"], 4);
}

#[test]
fn fit_reports_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(4));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "fit", "--manifest", p(&manifest), "--variant", "E_ind", "--variant", "P_pool",
            "--lambda-grid", "0.5:5:5", "--seed", "9", "--out", p(out),
        ]);
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

#[test]
fn single_population_reduces_to_target_only_rda() {
    let tmp = TempDir::new().unwrap();
    let sim = json!({"p": 20, "n": [80], "alpha_sq": [1.0], "rho": 0.0, "n_test": 100, "stratified": true});
    let manifest = simulate_small(tmp.path(), &sim);
    let out = tmp.path().join("fit");
    run_ok(&["fit", "--manifest", p(&manifest), "--lambda-grid", "0.5:5:4", "--out", p(&out)]);
    let report = read_report(&out);
    assert_eq!(report["weights"]["P_ind"]["w"].as_array().unwrap().len(), 1);
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("weight 1")));
}

#[test]
fn supplied_hyperparameters_bypass_estimation() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(6));
    let fit = json!({
        "manifest": manifest,
        "lambdas": [1.0, 1.0, 1.0],
        "hyper": {"alpha_sq": [1.0, 1.0, 1.0], "rho": [[1.0, 0.7, 0.7], [0.7, 1.0, 0.7], [0.7, 0.7, 1.0]]}
    });
    let cfg = write_config(tmp.path(), "fit.json", &fit);
    let out = tmp.path().join("fit");
    run_ok(&["fit", "--config", p(&cfg), "--out", p(&out)]);
    let report = read_report(&out);
    assert_eq!(report["hyperparams"]["provenance"], "user_supplied");
    assert_eq!(report["hyperparams"]["alpha_sq"], json!([1.0, 1.0, 1.0]));
    assert!(report["risk"]["P_ind"]["cross_validation"].is_null());
}

#[test]
fn pooled_variant_rejects_per_population_lambdas() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(7));
    let fit = json!({"manifest": manifest, "variants": ["P_pool"], "lambdas": [0.5, 1.0, 2.0]});
    let cfg = write_config(tmp.path(), "fit.json", &fit);
    let (code, _) = tlrda(&["fit", "--config", p(&cfg), "--out", p(&tmp.path().join("fit"))]);
    assert_eq!(code, 2);
}

#[test]
fn single_class_population_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(8));
    let file = manifest.parent().unwrap().join("population_1.csv");
    let text = fs::read_to_string(&file).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.ends_with(",1") && !l.ends_with(",-1"))
        .map(|(_, l)| l)
        .collect();
    fs::write(&file, kept.join("\n")).unwrap();
    let (code, stderr) = tlrda(&["fit", "--manifest", p(&manifest), "--out", p(&tmp.path().join("fit"))]);
    assert_eq!(code, 3, "{stderr}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut sim = small_sim(1);
    sim["toeplitz"] = json!(0.3);
    let cfg = write_config(tmp.path(), "sim.json", &sim);
    let (code, stderr) = tlrda(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("toeplitz"));
}

#[test]
fn malformed_lambda_grid_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = tlrda(&["validate", "--lambda-grid", "1:0.5", "--out", p(tmp.path())]);
    assert_eq!(code, 2);
}

#[test]
fn unwritable_output_is_reported() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &small_sim(1));
    let (code, stderr) = tlrda(&["simulate", "--config", p(&cfg), "--out", p(&blocker.join("sub"))]);
    assert_eq!(code, 3);
    assert!(stderr.contains("io error"));
}

#[test]
fn variance_filter_keeps_the_requested_count() {
    let tmp = TempDir::new().unwrap();
    let manifest = simulate_small(tmp.path(), &small_sim(10));
    let fit = json!({"manifest": manifest, "lambdas": [1.0, 1.0, 1.0], "filter": {"method": "t_stat", "top": 15}});
    let cfg = write_config(tmp.path(), "fit.json", &fit);
    let out = tmp.path().join("fit");
    run_ok(&["fit", "--config", p(&cfg), "--out", p(&out)]);
    let report = read_report(&out);
    assert!(report["notes"][0].as_str().unwrap().starts_with("filter kept 15 features"));
}

fn validation_config(alpha_sq: f64, reps: usize) -> Value {
    json!({
        "sim": {"p": 60, "n": [90, 60], "alpha_sq": [alpha_sq, alpha_sq], "rho": 0.5,
                "n_test": 1000, "stratified": true, "seed": 3},
        "lambda_grid": [0.5, 2.0],
        "reps": reps
    })
}

#[test]
fn single_replicate_leaves_sd_empty() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "val.json", &validation_config(1.0, 1));
    let out = tmp.path().join("v");
    run_ok(&["validate", "--config", p(&cfg), "--out", p(&out)]);
    let text = fs::read_to_string(out.join("validation.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "lambda,method,error_theory,error_mc_mean,error_mc_sd,n_reps,seed0"
    );
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[4], "", "{line}");
        assert_eq!(fields[5], "1");
    }
    assert_eq!(read_report(&out)["experiment_tables"]["validation"], "validation.csv");
}

#[test]
fn null_signal_curves_sit_at_one_half() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "val.json", &validation_config(0.0, 10));
    let out = tmp.path().join("v");
    run_ok(&["validate", "--config", p(&cfg), "--out", p(&out)]);
    let mut reader = csv::Reader::from_path(out.join("validation.csv")).unwrap();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        let theory: f64 = record[2].parse().unwrap();
        let mc: f64 = record[3].parse().unwrap();
        assert_eq!(theory, 0.5);
        assert!((mc - 0.5).abs() < 0.03, "{record:?}");
        rows += 1;
    }
    assert_eq!(rows, 8);
}

#[test]
fn crossover_threshold_falls_with_fewer_sources() {
    let tmp = TempDir::new().unwrap();
    let gammas: Vec<f64> = (0..120).map(|i| 1.6 * 1.03f64.powi(i)).collect();
    let mut stars = Vec::new();
    for k in [6usize, 4, 2] {
        let cfg = json!({"k": k, "gammas": gammas, "r": 0.5, "r_prime": 3.0, "rho": 0.5,
                         "alpha_sq": vec![0.5; k]});
        let path = write_config(tmp.path(), &format!("x{k}.json"), &cfg);
        let out = tmp.path().join(format!("x{k}"));
        run_ok(&["crossover", "--config", p(&path), "--out", p(&out)]);
        let mut reader = csv::Reader::from_path(out.join("crossover.csv")).unwrap();
        let wins: Vec<bool> = reader.records().map(|r| &r.unwrap()[5] == "true").collect();
        assert_eq!(wins.len(), gammas.len());
        let star = read_report(&out)["risk"]["crossover"]["gamma_star"].as_f64().expect("crossover found");
        let first = gammas.iter().position(|&g| g == star).unwrap();
        assert!(wins[first..].iter().all(|&w| w), "K={k}: pooled loses beyond gamma*");
        stars.push(star);
    }
    assert!(stars[0] > gammas[0], "K=6 crossover should be interior");
    assert!(stars[0] > stars[1] && stars[1] >= stars[2], "{stars:?}");
}

#[test]
fn robustness_table_has_three_methods_per_lambda() {
    let tmp = TempDir::new().unwrap();
    let cfg = json!({
        "sim": {"p": 40, "n": [100, 80, 60], "alpha_sq": [0.5, 0.5, 0.5], "rho": 0.5,
                "cov_kind": {"kind": "ar1_toeplitz", "t": 0.5}, "n_test": 500,
                "test_spectrum_power": 3.0, "test_basis": "coordinate", "stratified": true},
        "lambda_grid": [0.5, 1.0, 2.0],
        "reps": 2
    });
    let path = write_config(tmp.path(), "rob.json", &cfg);
    let out = tmp.path().join("r");
    run_ok(&["robustness", "--config", p(&path), "--out", p(&out)]);
    assert_eq!(csv_rows(&out.join("robustness.csv")), 9);
    let summary = &read_report(&out)["risk"]["robustness"];
    assert!(summary["fraction_estimation_at_most_prediction"].is_number());
}
