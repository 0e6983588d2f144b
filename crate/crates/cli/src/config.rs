//! JSON run configurations and command-line overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tlrda::experiments::{default_lambda_grid, log_grid};
use tlrda::hyper::HyperParams;
use tlrda::weights::Variant;

use crate::error::{CliError, CliResult};

/// `a:b:n`, expanded to `n` log-spaced points on `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub a: f64,
    pub b: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn points(&self) -> CliResult<Vec<f64>> {
        Ok(log_grid(self.a, self.b, self.n)?)
    }
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(format!("expected a:b:n, got `{s}`"));
        };
        let a: f64 = a.parse().map_err(|_| format!("bad grid start `{a}`"))?;
        let b: f64 = b.parse().map_err(|_| format!("bad grid end `{b}`"))?;
        let n: usize = n.parse().map_err(|_| format!("bad grid size `{n}`"))?;
        if !(a > 0.0 && b >= a && n >= 1) {
            return Err(format!("grid needs 0 < a <= b and n >= 1, got `{s}`"));
        }
        Ok(GridSpec { a, b, n })
    }
}

/// How features are ranked before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    /// Total variance over all training rows.
    Variance,
    /// Absolute two-sample Welch statistic on the target population.
    TStat,
}

/// Keeps the `top` highest-ranked features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFilter {
    pub method: FilterMethod,
    pub top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_fit_variants")]
    pub variants: Vec<Variant>,
    /// Candidate shared `lambda` values for cross-validation.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Fixed per-population `lambda`, target last. Skips cross-validation.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the estimated hyperparameters.
    #[serde(default)]
    pub hyper: Option<HyperParams<f64>>,
    #[serde(default)]
    pub filter: Option<FeatureFilter>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            variants: default_fit_variants(),
            lambda_grid: default_lambda_grid(),
            lambdas: None,
            folds: default_folds(),
            seed: 0,
            hyper: None,
            filter: None,
        }
    }
}

fn default_fit_variants() -> Vec<Variant> {
    vec![Variant::PInd]
}

pub fn default_folds() -> usize {
    5
}

impl FitConfig {
    pub fn check(&self) -> CliResult<()> {
        if self.variants.is_empty() {
            return Err(CliError::Config("no variants requested".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(CliError::Config("lambda grid must be nonempty and positive".into()));
        }
        if let Some(ls) = &self.lambdas {
            if ls.is_empty() || ls.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return Err(CliError::Config("lambdas must be positive".into()));
            }
        }
        if self.folds < 2 {
            return Err(CliError::Config("folds must be at least 2".into()));
        }
        if let Some(f) = &self.filter {
            if f.top == 0 {
                return Err(CliError::Config("filter must keep at least one feature".into()));
            }
        }
        Ok(())
    }
}

/// Pooled-versus-individual sweep over the aspect ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossoverConfig {
    pub k: usize,
    pub gammas: Vec<f64>,
    pub r: f64,
    pub r_prime: f64,
    pub rho: f64,
    pub alpha_sq: Vec<f64>,
    /// Population covariance eigenvalues; the identity when absent.
    #[serde(default)]
    pub eigenvalues: Option<Vec<f64>>,
}
