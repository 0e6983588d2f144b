//! Replicated simulation studies: limiting error against Monte Carlo test
//! error, and the covariance-shift comparison of weight types.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_variant, naive_rda, HyperSource, PluginContext};
use crate::hyper::HyperParams;
use crate::risk::{misclassification, unbalanced_limiting_error};
use crate::simgen::{simulate, Covariance, SimConfig};
use crate::spectral::{deterministic_summary, EigenSpectrum};
use crate::weights::{deterministic_problem, solve_weights, DesignRatios, Variant};

/// One row of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub lambda: f64,
    pub method: String,
    pub error_theory: Option<f64>,
    pub error_mc_mean: f64,
    /// `None` with a single replicate.
    pub error_mc_sd: Option<f64>,
    pub n_reps: usize,
    pub seed0: u64,
}

/// `n` log-spaced points from `a` to `b`.
pub fn log_grid(a: f64, b: f64, n: usize) -> Result<Vec<f64>> {
    if !(a > 0.0 && b >= a && n >= 1) {
        return Err(Error::Contract(format!("bad grid {a}:{b}:{n}")));
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    let (la, lb) = (a.ln(), b.ln());
    Ok((0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// 30 log-spaced points on `[0.3, 10]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(0.3, 10.0, 30).expect("valid grid")
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (mean, sd)
}

/// Method label used in experiment tables: `TL_E`, `TL_P`, `TLP_E`, `TLP_P`,
/// `TLH_E`, `TLH_P`.
pub fn method_label(variant: Variant) -> &'static str {
    match variant {
        Variant::EInd => "TL_E",
        Variant::PInd => "TL_P",
        Variant::EPool => "TLP_E",
        Variant::PPool => "TLP_P",
        Variant::EHet => "TLH_E",
        Variant::PHet => "TLH_P",
    }
}

/// Whether each replicate uses the true or the estimated hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    #[default]
    True,
    Estimated,
}

/// Theory-versus-simulation sweep over a `lambda` grid shared by all populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub sim: SimConfig,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub hyper: HyperMode,
}

fn default_reps() -> usize {
    50
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::EInd, Variant::PInd, Variant::EPool, Variant::PPool]
}

impl ValidationConfig {
    /// Toeplitz(0.5), `p = 150`, `n = 150..100`, 50 replicates, 30 grid points.
    pub fn preset() -> Self {
        Self {
            sim: SimConfig::validation_preset(),
            lambda_grid: default_lambda_grid(),
            reps: default_reps(),
            variants: default_variants(),
            hyper: HyperMode::True,
        }
    }
}

/// Expected class counts of population `k` under the configured prior.
fn expected_counts(config: &SimConfig, k: usize) -> (usize, usize) {
    let n = config.n[k];
    let plus = ((config.pi_plus(k) * n as f64).round() as usize).clamp(1, n - 1);
    (plus, n - plus)
}

/// Limiting error of one variant at a shared `lambda`, for a shared
/// covariance without spectrum shift. `None` when the theory does not apply.
pub fn theoretical_error(config: &SimConfig, variant: Variant, lambda: f64) -> Result<Option<f64>> {
    if config.heterogeneous_cov.is_some() || config.test_spectrum_power.is_some() || variant.is_heterogeneous() {
        return Ok(None);
    }
    let hyper = config.hyper()?;
    let cov = Covariance::build(&config.cov_kind, config.p)?;
    let h = EigenSpectrum::population(cov.eigenvalues.clone())?;
    let k = config.k();
    let counts: Vec<_> = (0..k).map(|i| expected_counts(config, i)).collect();
    let design = DesignRatios::<f64>::from_counts(config.p, &counts);
    let lambdas = vec![lambda; k];
    let own = deterministic_problem(variant, &hyper, &h, &design, &lambdas)?;
    let w = solve_weights(&own)?.vector();
    if w.iter().all(|x| *x == 0.0) {
        return Ok(Some(0.5));
    }
    let scoring = if variant.is_estimation() {
        let pred = crate::fit::prediction_counterpart(variant);
        deterministic_problem(pred, &hyper, &h, &design, &lambdas)?
    } else {
        own
    };
    let (n_plus, n_minus) = counts[k - 1];
    let target_summary = deterministic_summary(&h, design.gamma[k - 1], lambda)?;
    let pf = config.p as f64;
    let intercept = (pf / n_minus as f64 - pf / n_plus as f64) / 4.0 * target_summary.trace_r_sigma();
    let pi_test = config.test_class_balance.unwrap_or(config.pi_plus(k - 1));
    unbalanced_limiting_error(&w, &scoring.u, &scoring.system(), intercept, pi_test).map(Some)
}

/// Test errors of one replicate, indexed `[lambda][method]`.
fn replicate_errors(
    config: &SimConfig,
    hyper: &HyperSource,
    grid: &[f64],
    methods: &[Method],
) -> Result<Vec<Vec<f64>>> {
    let data = simulate(config)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::Contract("experiments need n_test > 0".into()))?;
    let ctx = PluginContext::new(&data.train)?;
    let h = hyper.resolve(&ctx)?;
    grid.iter()
        .map(|&l| {
            methods
                .iter()
                .map(|m| match m {
                    Method::Naive => {
                        let d = naive_rda(&ctx, l)?;
                        let scores: Vec<f64> = d.scores(test.features()).iter().copied().collect();
                        misclassification(&scores, d.intercept, test.labels())
                    }
                    Method::Transfer(v) => fit_variant(&ctx, *v, &h, &vec![l; ctx.k()])?.error(test),
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Method {
    Naive,
    Transfer(Variant),
}

fn hyper_source(mode: HyperMode, config: &SimConfig) -> Result<HyperSource> {
    Ok(match mode {
        HyperMode::True => HyperSource::Supplied(config.hyper()?),
        HyperMode::Estimated => HyperSource::Estimate,
    })
}

/// Runs replicates in parallel with seeds `seed0, seed0 + 1, ...` and
/// aggregates per grid point and method.
fn run_replicates(
    config: &SimConfig,
    mode: HyperMode,
    grid: &[f64],
    methods: &[Method],
    reps: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if reps == 0 || grid.is_empty() {
        return Err(Error::Contract("need at least one replicate and one grid point".into()));
    }
    config.validate()?;
    let hyper = hyper_source(mode, config)?;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let c = SimConfig {
                seed: config.seed.wrapping_add(r),
                ..config.clone()
            };
            replicate_errors(&c, &hyper, grid, methods)
        })
        .collect()
}

/// Per-replicate errors, `[rep][lambda][method]`, alongside the table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ExperimentRow>,
    pub methods: Vec<String>,
    pub grid: Vec<f64>,
    pub replicates: Vec<Vec<Vec<f64>>>,
}

impl ExperimentOutput {
    fn assemble(
        grid: &[f64],
        labels: Vec<String>,
        theory: Vec<Vec<Option<f64>>>,
        replicates: Vec<Vec<Vec<f64>>>,
        seed0: u64,
    ) -> Self {
        let mut rows = Vec::new();
        for (g, &lambda) in grid.iter().enumerate() {
            for (m, label) in labels.iter().enumerate() {
                let xs: Vec<f64> = replicates.iter().map(|r| r[g][m]).collect();
                let (mean, sd) = mean_sd(&xs);
                rows.push(ExperimentRow {
                    lambda,
                    method: label.clone(),
                    error_theory: theory[g][m],
                    error_mc_mean: mean,
                    error_mc_sd: sd,
                    n_reps: xs.len(),
                    seed0,
                });
            }
        }
        Self {
            rows,
            methods: labels,
            grid: grid.to_vec(),
            replicates,
        }
    }

    /// Rows of one method, in grid order.
    pub fn method_rows<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ExperimentRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Mean over the grid of `|theory - MC mean|` for one method.
    pub fn mean_abs_gap(&self, method: &str) -> Option<f64> {
        let gaps: Vec<f64> = self
            .method_rows(method)
            .map(|r| r.error_theory.map(|t| (t - r.error_mc_mean).abs()))
            .collect::<Option<Vec<_>>>()?;
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

/// Limiting error against Monte Carlo test error for each variant and `lambda`.
pub fn validation_experiment(config: &ValidationConfig) -> Result<ExperimentOutput> {
    let methods: Vec<Method> = config.variants.iter().map(|&v| Method::Transfer(v)).collect();
    let theory = config
        .lambda_grid
        .par_iter()
        .map(|&l| {
            config
                .variants
                .iter()
                .map(|&v| theoretical_error(&config.sim, v, l))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let replicates = run_replicates(&config.sim, config.hyper, &config.lambda_grid, &methods, config.reps)?;
    let labels = config.variants.iter().map(|&v| method_label(v).to_string()).collect();
    Ok(ExperimentOutput::assemble(
        &config.lambda_grid,
        labels,
        theory,
        replicates,
        config.sim.seed,
    ))
}

/// Target-only RDA against the estimation and prediction weights when the
/// test covariance differs from the training one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub sim: SimConfig,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub reps: usize,
    #[serde(default)]
    pub hyper: HyperMode,
}

fn default_seeds() -> usize {
    20
}

impl RobustnessConfig {
    /// `p = 150`, `n = 250..160`, `rho = 0.5`, Toeplitz(0.5) training covariance,
    /// test eigenvalues cubed on the coordinate axes, true hyperparameters,
    /// 20 seeds.
    pub fn preset() -> Self {
        Self {
            sim: SimConfig::robustness_preset(),
            lambda_grid: default_lambda_grid(),
            reps: default_seeds(),
            hyper: HyperMode::True,
        }
    }
}

pub type RobustnessRow = ExperimentRow;

pub const NAIVE_LABEL: &str = "naive";

/// Empirical errors of naive RDA, `w^E` and `w^P` across the grid.
pub fn robustness_experiment(config: &RobustnessConfig) -> Result<ExperimentOutput> {
    let methods = [
        Method::Naive,
        Method::Transfer(Variant::EInd),
        Method::Transfer(Variant::PInd),
    ];
    let replicates = run_replicates(&config.sim, config.hyper, &config.lambda_grid, &methods, config.reps)?;
    let labels = vec![
        NAIVE_LABEL.to_string(),
        method_label(Variant::EInd).to_string(),
        method_label(Variant::PInd).to_string(),
    ];
    let theory = vec![vec![None; methods.len()]; config.lambda_grid.len()];
    Ok(ExperimentOutput::assemble(
        &config.lambda_grid,
        labels,
        theory,
        replicates,
        config.sim.seed,
    ))
}

/// Fraction of grid points where method `a`'s mean error is at most `b`'s.
pub fn fraction_at_most(out: &ExperimentOutput, a: &str, b: &str) -> f64 {
    let xa: Vec<f64> = out.method_rows(a).map(|r| r.error_mc_mean).collect();
    let xb: Vec<f64> = out.method_rows(b).map(|r| r.error_mc_mean).collect();
    let hits = xa.iter().zip(&xb).filter(|(x, y)| x <= y).count();
    hits as f64 / xa.len().max(1) as f64
}

/// Oracle finite-sample weights for the populations of one simulated dataset,
/// next to the asymptotic weights of the same variant.
pub fn oracle_and_asymptotic(
    config: &SimConfig,
    variant: Variant,
    lambda: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if variant.is_pooled() || variant.is_heterogeneous() {
        return Err(Error::Contract("oracle comparison uses individual covariances".into()));
    }
    let hyper: HyperParams<f64> = config.hyper()?;
    let cov = Covariance::build(&config.cov_kind, config.p)?;
    let h = EigenSpectrum::population(cov.eigenvalues.clone())?;
    let k = config.k();
    let counts: Vec<_> = (0..k).map(|i| expected_counts(config, i)).collect();
    let design = DesignRatios::<f64>::from_counts(config.p, &counts);
    let asymptotic = solve_weights(&deterministic_problem(variant, &hyper, &h, &design, &vec![lambda; k])?)?.vector();
    let data = simulate(&SimConfig {
        n_test: 0,
        ..config.clone()
    })?;
    let ctx = PluginContext::new(&data.train)?;
    let dirs: Vec<DVector<f64>> = crate::fit::directions(&ctx, variant, &vec![lambda; k])?
        .into_iter()
        .map(|d| d.direction)
        .collect();
    let oracle = crate::weights::finite_sample_oracle_weights(
        variant.is_estimation(),
        data.target_delta(),
        &data.covariances[k - 1].matrix,
        &dirs,
    )?;
    Ok((oracle, asymptotic))
}
