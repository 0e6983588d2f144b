//! The five subcommands. Each writes `report.json` plus its tables into the
//! output directory.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use tlrda::experiments::{
    fraction_at_most, method_label, robustness_experiment, validation_experiment, ExperimentOutput,
    RobustnessConfig, ValidationConfig, NAIVE_LABEL,
};
use tlrda::fit::{cross_validate, fit_variant, HyperSource, PluginContext};
use tlrda::hyper::{HyperParams, Provenance};
use tlrda::risk::{crossover_analysis, CrossoverParams};
use tlrda::sample::PopulationSample;
use tlrda::simgen::{simulate, SimConfig};
use tlrda::spectral::EigenSpectrum;
use tlrda::weights::Variant;
use tlrda::Error;

use crate::config::{CrossoverConfig, FeatureFilter, FilterMethod, FitConfig, GridSpec};
use crate::error::{CliError, CliResult};
use crate::io::{
    ensure_dir, read_json, write_json, write_population, write_table, Manifest, PopulationEntry, TestEntry,
    MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::report::{to_value, Report, REPORT_FILE};

/// Overrides shared by the experiment commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda_grid: Option<GridSpec>,
    pub reps: Option<usize>,
    pub variants: Vec<Variant>,
    pub folds: Option<usize>,
    pub manifest: Option<PathBuf>,
}

fn load_or<T: serde::de::DeserializeOwned>(config: Option<&Path>, default: impl FnOnce() -> T) -> CliResult<T> {
    match config {
        Some(path) => read_json(path),
        None => Ok(default()),
    }
}

fn population_file(id: usize) -> String {
    format!("population_{id}.csv")
}

pub fn cmd_simulate(config: Option<&Path>, overrides: &Overrides, out: &Path) -> CliResult<Report> {
    let mut sim: SimConfig = load_or(config, SimConfig::validation_preset)?;
    if let Some(seed) = overrides.seed {
        sim.seed = seed;
    }
    sim.validate()?;
    let data = simulate(&sim)?;
    ensure_dir(out)?;

    let k = data.train.len();
    let mut populations = Vec::with_capacity(k);
    for sample in &data.train {
        let id = sample.population_id();
        let file = population_file(id);
        write_population(&out.join(&file), sample)?;
        populations.push(PopulationEntry {
            population_id: id,
            file: file.into(),
            rows: Some(sample.n()),
            target: id == data.train[k - 1].population_id(),
        });
    }
    let mut notes = Vec::new();
    let test = match &data.test {
        Some(t) => {
            write_population(&out.join("test.csv"), t)?;
            Some(TestEntry {
                file: "test.csv".into(),
                rows: Some(t.n()),
            })
        }
        None => {
            notes.push("n_test = 0: no test file written".to_string());
            None
        }
    };
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        p: Some(sim.p),
        populations,
        test,
        notes: notes.clone(),
        seed: Some(sim.seed),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let mut report = Report::new("simulate", sim.seed, &sim);
    report.hyperparams = Some(sim.hyper()?);
    report.notes = notes;
    report.notes.push(format!("manifest: {MANIFEST_FILE}"));
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Feature indices kept by the filter, in ascending order.
pub fn select_features(samples: &[PopulationSample], filter: &FeatureFilter) -> CliResult<Vec<usize>> {
    let p = samples[0].p();
    if filter.top > p {
        return Err(CliError::Config(format!("filter keeps {} of {p} features", filter.top)));
    }
    let score: Vec<f64> = match filter.method {
        FilterMethod::Variance => {
            let rows: usize = samples.iter().map(|s| s.n()).sum();
            if rows < 2 {
                return Err(CliError::Data("variance filter needs at least two rows".into()));
            }
            (0..p)
                .map(|j| {
                    let col = samples.iter().flat_map(|s| s.features().column(j).iter().copied().collect::<Vec<_>>());
                    let xs: Vec<f64> = col.collect();
                    let mean = xs.iter().sum::<f64>() / rows as f64;
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (rows - 1) as f64
                })
                .collect()
        }
        FilterMethod::TStat => {
            let target = samples.last().expect("nonempty");
            let (n_plus, n_minus) = target.class_counts();
            if n_plus < 2 || n_minus < 2 {
                return Err(CliError::Data("t filter needs two rows per class in the target".into()));
            }
            (0..p)
                .map(|j| {
                    let col = target.features().column(j);
                    let stats = |class: i8, n: usize| {
                        let xs: Vec<f64> = (0..target.n())
                            .filter(|&i| target.labels()[i] == class)
                            .map(|i| col[i])
                            .collect();
                        let mean = xs.iter().sum::<f64>() / n as f64;
                        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                        (mean, var / n as f64)
                    };
                    let (m1, v1) = stats(1, n_plus);
                    let (m2, v2) = stats(-1, n_minus);
                    let se = (v1 + v2).sqrt();
                    if se > 0.0 {
                        ((m1 - m2) / se).abs()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(filter.top);
    order.sort_unstable();
    Ok(order)
}

fn keep_columns(sample: &PopulationSample, columns: &[usize]) -> CliResult<PopulationSample> {
    let x = sample.features();
    let kept = DMatrix::from_fn(x.nrows(), columns.len(), |i, j| x[(i, columns[j])]);
    Ok(PopulationSample::new(kept, sample.labels().to_vec(), sample.population_id())?)
}

#[derive(Debug, Serialize)]
struct LambdaRisk {
    lambda: f64,
    limiting_error: Option<f64>,
    cv_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct VariantRisk {
    lambdas: Vec<f64>,
    intercept: f64,
    selected: tlrda::risk::RiskReport,
    cross_validation: Option<tlrda::fit::CvResult>,
    by_lambda: Vec<LambdaRisk>,
}

pub fn cmd_fit(config: Option<&Path>, overrides: &Overrides, out: &Path) -> CliResult<Report> {
    let mut cfg: FitConfig = load_or(config, FitConfig::default)?;
    let base = config.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
    cfg.manifest = match (&overrides.manifest, &cfg.manifest) {
        (Some(m), _) => Some(m.clone()),
        (None, Some(m)) => Some(base.join(m)),
        (None, None) => None,
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = overrides.lambda_grid {
        cfg.lambda_grid = grid.points()?;
    }
    if let Some(folds) = overrides.folds {
        cfg.folds = folds;
    }
    if !overrides.variants.is_empty() {
        cfg.variants = overrides.variants.clone();
    }
    cfg.check()?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Config("fit needs a manifest (config key `manifest` or --manifest)".into()))?;
    let manifest = Manifest::read(&manifest_path)?;
    let data_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (mut samples, mut test) = manifest.load(&data_dir)?;

    let mut report = Report::new("fit", cfg.seed, &cfg);
    if let Some(filter) = &cfg.filter {
        let columns = select_features(&samples, filter)?;
        samples = samples.iter().map(|s| keep_columns(s, &columns)).collect::<CliResult<_>>()?;
        test = test.map(|t| keep_columns(&t, &columns)).transpose()?;
        report.notes.push(format!(
            "filter kept {} features: {:?}",
            columns.len(),
            columns.iter().map(|j| j + 1).collect::<Vec<_>>()
        ));
    }

    let k = samples.len();
    if k == 1 {
        report
            .notes
            .push("single population: the classifier is target-only RDA with weight 1".into());
    }
    if let Some(ls) = &cfg.lambdas {
        if ls.len() != k {
            return Err(CliError::Config(format!("{} lambdas for {k} populations", ls.len())));
        }
    }
    let ctx = PluginContext::new(&samples)?;
    let source = match &cfg.hyper {
        Some(h) => HyperSource::Supplied(HyperParams::new(
            h.alpha_sq().to_vec(),
            h.rho().clone(),
            Provenance::UserSupplied,
        )?),
        None => HyperSource::Estimate,
    };
    let hyper = source.resolve(&ctx)?;
    report.hyperparams = Some(hyper.clone());

    for &variant in &cfg.variants {
        let (lambdas, cv) = match &cfg.lambdas {
            Some(ls) => (ls.clone(), None),
            None => {
                let cv = cross_validate(&samples, variant, &source, &cfg.lambda_grid, cfg.folds, cfg.seed)?;
                (vec![cv.selected; k], Some(cv))
            }
        };
        let classifier = fit_variant(&ctx, variant, &hyper, &lambdas)?;
        let mut selected = classifier.risk(&ctx)?;
        if let Some(t) = &test {
            let empirical = classifier.evaluate(t)?;
            selected.empirical_error = Some(empirical.error);
            selected.auc = empirical.auc;
        }
        let by_lambda = match &cv {
            Some(cv) => cv
                .grid
                .iter()
                .zip(&cv.mean_error)
                .map(|(&lambda, &e)| {
                    let limiting_error = match fit_variant(&ctx, variant, &hyper, &vec![lambda; k])
                        .and_then(|c| c.risk(&ctx))
                    {
                        Ok(r) => Some(r.limiting_error),
                        Err(Error::Numerical { .. } | Error::SingularCase(_)) => None,
                        Err(e) => return Err(CliError::from(e)),
                    };
                    Ok(LambdaRisk {
                        lambda,
                        limiting_error,
                        cv_error: e.is_finite().then_some(e),
                    })
                })
                .collect::<CliResult<Vec<_>>>()?,
            None => Vec::new(),
        };
        if classifier.weights.ill_conditioned() {
            report
                .notes
                .push(format!("{variant}: weight system is ill-conditioned"));
        }
        report.weights.insert(variant.name().to_string(), to_value(&classifier.weights));
        report.risk.insert(
            variant.name().to_string(),
            to_value(&VariantRisk {
                lambdas,
                intercept: classifier.intercept,
                selected,
                cross_validation: cv,
                by_lambda,
            }),
        );
    }
    ensure_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn experiment_summary(out: &ExperimentOutput) -> serde_json::Value {
    let gaps: serde_json::Map<String, serde_json::Value> = out
        .methods
        .iter()
        .filter_map(|m| out.mean_abs_gap(m).map(|g| (m.clone(), to_value(&g))))
        .collect();
    serde_json::json!({ "mean_abs_gap": gaps })
}

pub fn cmd_validate(config: Option<&Path>, overrides: &Overrides, out: &Path) -> CliResult<Report> {
    let mut cfg: ValidationConfig = load_or(config, ValidationConfig::preset)?;
    if let Some(seed) = overrides.seed {
        cfg.sim.seed = seed;
    }
    if let Some(grid) = overrides.lambda_grid {
        cfg.lambda_grid = grid.points()?;
    }
    if let Some(reps) = overrides.reps {
        cfg.reps = reps;
    }
    if !overrides.variants.is_empty() {
        cfg.variants = overrides.variants.clone();
    }
    cfg.sim.validate()?;
    if cfg.reps == 0 {
        return Err(CliError::Config("reps must be at least 1".into()));
    }
    let table = validation_experiment(&cfg)?;
    ensure_dir(out)?;
    write_table(&out.join("validation.csv"), &table.rows)?;

    let mut report = Report::new("validate", cfg.sim.seed, &cfg);
    report.hyperparams = Some(cfg.sim.hyper()?);
    report.risk.insert("validation".into(), experiment_summary(&table));
    report.experiment_tables.insert("validation".into(), "validation.csv".into());
    if cfg.reps == 1 {
        report.notes.push("single replicate: error_mc_sd is empty".into());
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn cmd_robustness(config: Option<&Path>, overrides: &Overrides, out: &Path) -> CliResult<Report> {
    let mut cfg: RobustnessConfig = load_or(config, RobustnessConfig::preset)?;
    if let Some(seed) = overrides.seed {
        cfg.sim.seed = seed;
    }
    if let Some(grid) = overrides.lambda_grid {
        cfg.lambda_grid = grid.points()?;
    }
    if let Some(reps) = overrides.reps {
        cfg.reps = reps;
    }
    cfg.sim.validate()?;
    if cfg.reps == 0 {
        return Err(CliError::Config("reps must be at least 1".into()));
    }
    let table = robustness_experiment(&cfg)?;
    ensure_dir(out)?;
    write_table(&out.join("robustness.csv"), &table.rows)?;

    let (e, p) = (method_label(Variant::EInd), method_label(Variant::PInd));
    let mut report = Report::new("robustness", cfg.sim.seed, &cfg);
    report.hyperparams = Some(cfg.sim.hyper()?);
    report.risk.insert(
        "robustness".into(),
        serde_json::json!({
            "fraction_estimation_at_most_prediction": fraction_at_most(&table, e, p),
            "fraction_estimation_at_most_naive": fraction_at_most(&table, e, NAIVE_LABEL),
            "fraction_prediction_at_most_naive": fraction_at_most(&table, p, NAIVE_LABEL),
        }),
    );
    report.experiment_tables.insert("robustness".into(), "robustness.csv".into());
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn cmd_crossover(config: Option<&Path>, overrides: &Overrides, out: &Path) -> CliResult<Report> {
    let path = config.ok_or_else(|| CliError::Config("crossover needs --config".into()))?;
    let cfg: CrossoverConfig = read_json(path)?;
    let spectrum = cfg
        .eigenvalues
        .clone()
        .map(EigenSpectrum::population)
        .transpose()?;
    let params = CrossoverParams {
        k: cfg.k,
        gammas: cfg.gammas.clone(),
        r: cfg.r,
        r_prime: cfg.r_prime,
        rho: cfg.rho,
        alpha_sq: cfg.alpha_sq.clone(),
        spectrum,
    };
    let analysis = crossover_analysis(&params)?;
    ensure_dir(out)?;
    write_table(&out.join("crossover.csv"), &analysis.rows)?;

    let mut report = Report::new("crossover", overrides.seed.unwrap_or(0), &cfg);
    report
        .risk
        .insert("crossover".into(), serde_json::json!({ "gamma_star": analysis.gamma_star }));
    report.experiment_tables.insert("crossover".into(), "crossover.csv".into());
    if analysis.gamma_star.is_none() {
        report.notes.push("pooled classifier never wins on the grid".into());
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(columns: &[[f64; 6]], labels: [i8; 6]) -> PopulationSample {
        let x = DMatrix::from_fn(6, columns.len(), |i, j| columns[j][i]);
        PopulationSample::new(x, labels.to_vec(), 1).unwrap()
    }

    #[test]
    fn filters_rank_by_variance_and_separation() {
        let labels = [1, 1, 1, -1, -1, -1];
        let s = sample(
            &[
                [0.0, 0.1, 0.0, 0.1, 0.0, 0.1],
                [5.0, -5.0, 4.0, -4.0, 6.0, -6.0],
                [1.0, 1.1, 0.9, -1.0, -1.1, -0.9],
            ],
            labels,
        );
        let by_var = select_features(std::slice::from_ref(&s), &FeatureFilter { method: FilterMethod::Variance, top: 1 });
        assert_eq!(by_var.unwrap(), vec![1]);
        let by_t = select_features(std::slice::from_ref(&s), &FeatureFilter { method: FilterMethod::TStat, top: 2 });
        assert_eq!(by_t.unwrap(), vec![0, 2]);
        let too_many = select_features(&[s], &FeatureFilter { method: FilterMethod::TStat, top: 4 });
        assert!(matches!(too_many, Err(CliError::Config(_))));
    }
}
