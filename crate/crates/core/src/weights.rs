//! Optimal combination weights for the per-population discriminant directions.
//!
//! Every variant reduces to a quadratic criterion `w^T (A + R) w - 2 u^T w`
//! whose inputs come from spectral summaries and cross traces:
//!
//! * `u_k = rho_kK alpha_k alpha_K lin_k`
//! * `A_kk = alpha_k^2 quad_k`, `A_kk' = rho_kk' alpha_k alpha_k' C_kk'`
//! * `R_kk = noise_k`, the contribution of the class-mean estimation noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::real::Real;
use crate::spectral::{deterministic_cross, deterministic_summary, mean_inv_t, EigenSpectrum, SpectralSummary};

/// Which criterion is minimized and how the directions are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "E_ind")]
    EInd,
    #[serde(rename = "P_ind")]
    PInd,
    #[serde(rename = "E_pool")]
    EPool,
    #[serde(rename = "P_pool")]
    PPool,
    #[serde(rename = "E_het")]
    EHet,
    #[serde(rename = "P_het")]
    PHet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::EInd,
        Variant::PInd,
        Variant::EPool,
        Variant::PPool,
        Variant::EHet,
        Variant::PHet,
    ];

    /// Minimizes the distance to the Bayes direction rather than the prediction risk.
    pub fn is_estimation(self) -> bool {
        matches!(self, Variant::EInd | Variant::EPool | Variant::EHet)
    }

    /// Directions share the pooled covariance.
    pub fn is_pooled(self) -> bool {
        matches!(self, Variant::EPool | Variant::PPool)
    }

    pub fn is_heterogeneous(self) -> bool {
        matches!(self, Variant::EHet | Variant::PHet)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::EInd => "E_ind",
            Variant::PInd => "P_ind",
            Variant::EPool => "E_pool",
            Variant::PPool => "P_pool",
            Variant::EHet => "E_het",
            Variant::PHet => "P_het",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown variant {s:?}")))
    }
}

/// Spectral summary of the covariance behind direction `k` plus the aspect
/// ratio of its class-mean noise, `p (1/(4 n_plus) + 1/(4 n_minus))`.
///
/// For pooled variants the summary is that of the pooled covariance at `lambda_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationSpectral<T: Real> {
    pub summary: SpectralSummary<T>,
    pub noise_gamma: T,
}

/// Cross-population traces feeding the off-diagonal entries.
///
/// `matrix[(k, k')]` is `tr(R_k R_k' W)/p` with `W` the identity for estimation
/// variants and the (target) covariance for prediction variants. Its diagonal
/// is read only by `P_het`, where source diagonals are `tr(R_k Sigma_K R_k)/p`.
/// `inverse[k]` is `tr(Sigma_K^-1 R_k)/p` for the sources of `E_het`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct CrossTraces<T: Real> {
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<T>,
    pub inverse: Option<Vec<T>>,
}

impl<T: Real> CrossTraces<T> {
    pub fn new(matrix: DMatrix<T>) -> Self {
        Self {
            matrix,
            inverse: None,
        }
    }
}

fn serialize_matrix<T: Real, S: serde::Serializer>(
    m: &DMatrix<T>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<T>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

/// Everything a weight problem is built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct ProblemInputs<T: Real> {
    pub variant: Variant,
    pub hyper: HyperParams<T>,
    pub populations: Vec<PopulationSpectral<T>>,
    /// Required unless the variant is pooled.
    pub cross: Option<CrossTraces<T>>,
    /// `E(1/T)` of the (target) population spectrum; estimation variants only.
    pub mean_inv_t: Option<T>,
}

/// The quadratic criterion of one variant, with the last index as target.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProblem<T: Real> {
    pub variant: Variant,
    pub u: DVector<T>,
    pub a: DMatrix<T>,
    /// Diagonal of `R`.
    pub r: DVector<T>,
    pub inputs: ProblemInputs<T>,
}

impl<T: Real> WeightProblem<T> {
    pub fn k(&self) -> usize {
        self.u.len()
    }

    /// `A + R`.
    pub fn system(&self) -> DMatrix<T> {
        &self.a + DMatrix::from_diagonal(&self.r)
    }
}

/// `E(1/T)/lambda - v m`, the limit of `tr(Sigma^-1 R)/p`.
fn inverse_trace<T: Real>(s: &SpectralSummary<T>, mean_inv: T) -> T {
    s.trace_sigma_inv_r(mean_inv)
}

pub fn build_problem<T: Real>(inputs: ProblemInputs<T>) -> Result<WeightProblem<T>> {
    let variant = inputs.variant;
    let k = inputs.populations.len();
    let h = &inputs.hyper;
    if k == 0 || h.k() != k {
        return Err(Error::Contract(format!(
            "{k} populations but hyperparameters for {}",
            h.k()
        )));
    }
    if variant.is_estimation() != inputs.mean_inv_t.is_some() {
        return Err(Error::Contract(if variant.is_estimation() {
            format!("{variant} needs E(1/T)")
        } else {
            format!("{variant} takes no E(1/T)")
        }));
    }
    let pops = &inputs.populations;
    if variant.is_pooled() {
        let l0 = pops[0].summary.lambda;
        let g0 = pops[0].summary.gamma;
        if pops
            .iter()
            .any(|p| p.summary.lambda != l0 || p.summary.gamma != g0)
        {
            return Err(Error::Contract(
                "pooled variants need one lambda and the pooled summary for every population".into(),
            ));
        }
    }
    let cross = match (&inputs.cross, variant.is_pooled()) {
        (Some(c), _) => {
            if c.matrix.nrows() != k || c.matrix.ncols() != k {
                return Err(Error::Contract("cross-trace matrix must be K x K".into()));
            }
            Some(c)
        }
        (None, true) => None,
        (None, false) => {
            return Err(Error::Contract(format!("{variant} needs cross traces")));
        }
    };
    let inverse = match variant {
        Variant::EHet => {
            let inv = cross
                .and_then(|c| c.inverse.as_ref())
                .ok_or_else(|| Error::Contract("E_het needs tr(Sigma_K^-1 R_k)/p".into()))?;
            if inv.len() != k {
                return Err(Error::Contract("one inverse trace per population".into()));
            }
            Some(inv)
        }
        _ => None,
    };

    let target = k - 1;
    let mut lin = vec![T::zero(); k];
    let mut quad = vec![T::zero(); k];
    let mut noise = vec![T::zero(); k];
    for (i, p) in pops.iter().enumerate() {
        let s = &p.summary;
        if variant.is_estimation() {
            let e_inv = inputs.mean_inv_t.expect("checked above");
            lin[i] = match inverse {
                Some(inv) if i != target => inv[i],
                _ => inverse_trace(s, e_inv),
            };
            quad[i] = s.m_prime;
            noise[i] = p.noise_gamma * s.trace_r2_sigma();
        } else {
            lin[i] = s.m;
            quad[i] = match (variant, cross) {
                (Variant::PHet, Some(c)) if i != target => c.matrix[(i, i)],
                _ => s.trace_r2_sigma(),
            };
            noise[i] = p.noise_gamma * s.trace_r2_sigma2();
        }
    }

    let alpha: Vec<T> = h.alpha_sq().iter().map(|a| a.sqrt()).collect();
    let rho = h.rho();
    let u = DVector::from_fn(k, |i, _| rho[(i, target)] * alpha[i] * alpha[target] * lin[i]);
    let a = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            h.alpha_sq()[i] * quad[i]
        } else {
            let c = match cross {
                Some(c) => (c.matrix[(i, j)] + c.matrix[(j, i)]) * T::lit(0.5),
                // Pooled directions share one resolvent.
                None => quad[0],
            };
            rho[(i, j)] * alpha[i] * alpha[j] * c
        }
    });
    let r = DVector::from_vec(noise);
    if r.iter().any(|x| !x.is_finite() || *x < T::zero()) || a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite or negative problem entries", f64::NAN));
    }
    let problem = WeightProblem {
        variant,
        u,
        a,
        r,
        inputs,
    };
    let min = problem.system().symmetric_eigenvalues().min();
    if !(min > T::zero()) {
        return Err(Error::numerical(
            "A + R is not positive definite; check the hyperparameters",
            min.as_f64(),
        ));
    }
    Ok(problem)
}

/// Aspect ratios of a shared-covariance design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRatios<T: Real> {
    /// `p / (n_k - 2)` per population.
    pub gamma: Vec<T>,
    /// `p (1/(4 n_plus) + 1/(4 n_minus))` per population.
    pub noise: Vec<T>,
    /// `p / sum(n_k - 2)`.
    pub pooled_gamma: T,
}

impl<T: Real> DesignRatios<T> {
    /// Balanced classes with sizes `n`.
    pub fn balanced(p: usize, n: &[usize]) -> Self {
        let pf = T::lit(p as f64);
        let dof: usize = n.iter().map(|n| n - 2).sum();
        Self {
            gamma: n.iter().map(|&n| pf / T::lit((n - 2) as f64)).collect(),
            noise: n.iter().map(|&n| pf / T::lit(n as f64)).collect(),
            pooled_gamma: pf / T::lit(dof as f64),
        }
    }

    /// Class sizes `(n_plus, n_minus)` per population.
    pub fn from_counts(p: usize, counts: &[(usize, usize)]) -> Self {
        let pf = T::lit(p as f64);
        let dof: usize = counts.iter().map(|(a, b)| a + b - 2).sum();
        Self {
            gamma: counts
                .iter()
                .map(|(a, b)| pf / T::lit((a + b - 2) as f64))
                .collect(),
            noise: counts
                .iter()
                .map(|&(a, b)| pf * T::lit(0.25 / a as f64 + 0.25 / b as f64))
                .collect(),
            pooled_gamma: pf / T::lit(dof as f64),
        }
    }
}

/// Limiting problem for a shared population covariance with spectrum `h`,
/// using deterministic equivalents in place of sample quantities.
pub fn deterministic_problem<T: Real>(
    variant: Variant,
    hyper: &HyperParams<T>,
    h: &EigenSpectrum<T>,
    design: &DesignRatios<T>,
    lambdas: &[T],
) -> Result<WeightProblem<T>> {
    if variant.is_heterogeneous() {
        return Err(Error::Contract(
            "deterministic problems assume a shared covariance".into(),
        ));
    }
    let k = lambdas.len();
    if design.gamma.len() != k || design.noise.len() != k {
        return Err(Error::Contract("one aspect ratio and lambda per population".into()));
    }
    let summaries = (0..k)
        .map(|i| {
            let g = if variant.is_pooled() {
                design.pooled_gamma
            } else {
                design.gamma[i]
            };
            deterministic_summary(h, g, lambdas[i])
        })
        .collect::<Result<Vec<_>>>()?;
    let populations = summaries
        .iter()
        .zip(&design.noise)
        .map(|(&summary, &noise_gamma)| PopulationSpectral {
            summary,
            noise_gamma,
        })
        .collect();
    let cross = (!variant.is_pooled()).then(|| {
        let weighted = !variant.is_estimation();
        CrossTraces::new(DMatrix::from_fn(k, k, |i, j| {
            deterministic_cross(h, &summaries[i], &summaries[j], weighted)
        }))
    });
    let mean_inv = if variant.is_estimation() {
        Some(mean_inv_t(h)?)
    } else {
        None
    };
    build_problem(ProblemInputs {
        variant,
        hyper: hyper.clone(),
        populations,
        cross,
        mean_inv_t: mean_inv,
    })
}

/// Limiting problem for population covariances that are diagonal in one common
/// basis; `spectra[k][i]` is the `i`-th diagonal entry of `Sigma_k`. Covers the
/// heterogeneous variants; pooled variants need a shared covariance.
pub fn deterministic_diagonal_problem<T: Real>(
    variant: Variant,
    hyper: &HyperParams<T>,
    spectra: &[Vec<T>],
    design: &DesignRatios<T>,
    lambdas: &[T],
) -> Result<WeightProblem<T>> {
    if variant.is_pooled() {
        return Err(Error::Contract("pooled variants assume a shared covariance".into()));
    }
    let k = lambdas.len();
    if spectra.len() != k || design.gamma.len() != k || design.noise.len() != k {
        return Err(Error::Contract("one spectrum, aspect ratio and lambda per population".into()));
    }
    let p = spectra[0].len();
    if spectra.iter().any(|s| s.len() != p) {
        return Err(Error::Contract("spectra disagree on p".into()));
    }
    let summaries = (0..k)
        .map(|i| {
            let h = EigenSpectrum::population(spectra[i].clone())?;
            deterministic_summary(&h, design.gamma[i], lambdas[i])
        })
        .collect::<Result<Vec<_>>>()?;
    let target = &spectra[k - 1];
    let pf = T::lit(p as f64);
    let mean = |f: &dyn Fn(usize) -> T| (0..p).fold(T::zero(), |acc, i| acc + f(i)) / pf;
    let denom = |a: usize, i: usize| summaries[a].fixed_point() * spectra[a][i] + lambdas[a];
    let weighted = !variant.is_estimation();
    let matrix = DMatrix::from_fn(k, k, |a, b| {
        mean(&|i| {
            let w = if weighted { target[i] } else { T::one() };
            w / (denom(a, i) * denom(b, i))
        })
    });
    let mut matrix = matrix;
    if variant == Variant::PHet {
        // tr(R_k Sigma_K R_k)/p shares one sample in both resolvents, which
        // adds a second-order term to the product of deterministic equivalents.
        for a in 0..k - 1 {
            let x = summaries[a].fixed_point();
            let g = design.gamma[a];
            let d2 = |i: usize| denom(a, i) * denom(a, i);
            let own = &spectra[a];
            let coupled = mean(&|i| own[i] * target[i] / d2(i));
            let self_term = mean(&|i| own[i] * own[i] / d2(i));
            let spread = mean(&|i| own[i] / d2(i));
            let coef = x * x * g * coupled / (T::one() - x * x * g * self_term);
            matrix[(a, a)] += coef * spread;
        }
    }
    let mut cross = CrossTraces::new(matrix);
    let mean_inv = if variant.is_estimation() {
        Some(mean_inv_t(&EigenSpectrum::population(target.clone())?)?)
    } else {
        None
    };
    if variant == Variant::EHet {
        cross.inverse = Some(
            (0..k)
                .map(|a| mean(&|i| T::one() / (target[i] * denom(a, i))))
                .collect(),
        );
    }
    let populations = summaries
        .iter()
        .zip(&design.noise)
        .map(|(&summary, &noise_gamma)| PopulationSpectral {
            summary,
            noise_gamma,
        })
        .collect();
    build_problem(ProblemInputs {
        variant,
        hyper: hyper.clone(),
        populations,
        cross: Some(cross),
        mean_inv_t: mean_inv,
    })
}

/// Solved weights with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct TransferWeights<T: Real> {
    pub variant: Variant,
    pub w: Vec<T>,
    #[serde(rename = "residual")]
    pub solver_residual: T,
    #[serde(rename = "condition")]
    pub condition_estimate: T,
}

/// Condition numbers above this are reported as ill-conditioned.
pub const CONDITION_WARNING: f64 = 1e8;

impl<T: Real> TransferWeights<T> {
    pub fn vector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.w)
    }

    pub fn ill_conditioned(&self) -> bool {
        self.condition_estimate.as_f64() > CONDITION_WARNING
    }
}

fn residual_tolerance<T: Real>() -> T {
    T::lit(1e-10).max(T::lit(1e3) * T::default_epsilon())
}

pub fn solve_weights<T: Real>(problem: &WeightProblem<T>) -> Result<TransferWeights<T>> {
    let s = problem.system();
    let eig = s.clone().symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    let condition = if min > T::zero() { max / min } else { T::max_value().unwrap_or(max) };
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::numerical(
            format!("A + R is not positive definite (condition {condition})"),
            min.as_f64(),
        )
    })?;
    let w = chol.solve(&problem.u);
    let residual = (&s * &w - &problem.u).norm();
    let scale = problem.u.norm();
    if w.iter().any(|x| !x.is_finite()) || residual > residual_tolerance::<T>() * scale.max(T::default_epsilon()) {
        return Err(Error::numerical(
            format!("weight solve failed (condition {condition})"),
            residual.as_f64(),
        ));
    }
    Ok(TransferWeights {
        variant: problem.variant,
        w: w.iter().copied().collect(),
        solver_residual: residual,
        condition_estimate: condition,
    })
}

/// Inputs of the closed-form weights for equal aspect ratios, regularizers and
/// source correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct Homogeneous<T: Real> {
    pub estimation: bool,
    pub alpha_sq: Vec<T>,
    pub rho: T,
    /// The common off-diagonal cross trace.
    pub cross: T,
    pub summary: SpectralSummary<T>,
    pub noise_gamma: T,
    /// Required for estimation weights.
    pub mean_inv_t: Option<T>,
}

/// Closed-form weights from a rank-one update of a diagonal system:
/// `w_k = alpha_K L alpha_k (rho - xi + (1 - rho) [k = K]) / (t alpha_k^2 + t_v)`.
pub fn homogeneous_closed_form<T: Real>(setup: &Homogeneous<T>) -> Result<TransferWeights<T>> {
    let k = setup.alpha_sq.len();
    if k == 0 {
        return Err(Error::Contract("no populations".into()));
    }
    let s = &setup.summary;
    let rho = setup.rho;
    let (lin, quad, t_v) = if setup.estimation {
        let e_inv = setup
            .mean_inv_t
            .ok_or_else(|| Error::Contract("estimation weights need E(1/T)".into()))?;
        (
            inverse_trace(s, e_inv),
            s.m_prime,
            setup.noise_gamma * s.trace_r2_sigma(),
        )
    } else {
        (s.m, s.trace_r2_sigma(), setup.noise_gamma * s.trace_r2_sigma2())
    };
    let t = quad - rho * setup.cross;
    let target = k - 1;
    let alpha_k = setup.alpha_sq[target].sqrt();
    let denom: Vec<T> = setup.alpha_sq.iter().map(|&a| t * a + t_v).collect();
    if denom.iter().any(|d| !(*d > T::zero())) {
        return Err(Error::numerical(
            "closed-form denominator is not positive",
            denom.iter().map(|d| d.as_f64()).fold(f64::INFINITY, f64::min),
        ));
    }
    let indicator = |i: usize| if i == target { T::one() } else { T::zero() };
    let rc = rho * setup.cross;
    let mut num = T::zero();
    let mut den = T::one();
    for i in 0..k {
        let frac = setup.alpha_sq[i] / denom[i];
        num += (rho + (T::one() - rho) * indicator(i)) * frac;
        den += rc * frac;
    }
    let xi = rc * num / den;
    let w: Vec<T> = (0..k)
        .map(|i| {
            alpha_k * lin * (rho - xi + (T::one() - rho) * indicator(i)) * setup.alpha_sq[i].sqrt()
                / denom[i]
        })
        .collect();
    Ok(TransferWeights {
        variant: match setup.estimation {
            true => Variant::EInd,
            false => Variant::PInd,
        },
        w,
        solver_residual: T::zero(),
        condition_estimate: T::one(),
    })
}

/// Exact finite-sample minimizer of either criterion, available only when the
/// true offsets and covariance are known.
///
/// Estimation: `min ||Sigma^-1 delta_K - sum w_k d_k||^2`.
/// Prediction: `min (sum w_k d_k)^T Sigma (sum w_k d_k) - 2 delta_K^T sum w_k d_k`.
pub fn finite_sample_oracle_weights(
    estimation: bool,
    delta_target: &DVector<f64>,
    sigma: &DMatrix<f64>,
    directions: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let k = directions.len();
    let p = delta_target.len();
    if k == 0 || sigma.nrows() != p || sigma.ncols() != p || directions.iter().any(|d| d.len() != p) {
        return Err(Error::Contract("oracle inputs disagree on dimensions".into()));
    }
    let d = DMatrix::from_columns(directions);
    let (g, h) = if estimation {
        let bayes = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Contract("oracle covariance must be positive definite".into()))?
            .solve(delta_target);
        (d.transpose() * &d, d.transpose() * bayes)
    } else {
        (d.transpose() * sigma * &d, d.transpose() * delta_target)
    };
    if h.iter().all(|x| *x == 0.0) {
        return Ok(DVector::zeros(k));
    }
    g.cholesky()
        .map(|c| c.solve(&h))
        .ok_or_else(|| Error::numerical("oracle Gram matrix is singular", 0.0))
}
