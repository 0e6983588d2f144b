//! Limiting and empirical classification error, unbalanced classes and the
//! pooled-versus-individual comparison.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::spectral::{EigenSpectrum, SpectralSummary};
use crate::weights::{deterministic_problem, solve_weights, DesignRatios, Variant};

pub use crate::experiments::{robustness_experiment, RobustnessConfig, RobustnessRow};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `u^T w / sqrt(w^T A w)`.
pub fn theta(w: &DVector<f64>, u: &DVector<f64>, a_err: &DMatrix<f64>) -> Result<f64> {
    let k = u.len();
    if w.len() != k || a_err.nrows() != k || a_err.ncols() != k {
        return Err(Error::Contract("weight, u and A must agree on K".into()));
    }
    let q = w.dot(&(a_err * w));
    if !(q > 0.0) {
        return Err(Error::Domain(
            "w^T A w must be positive; the zero weight has no error ratio".into(),
        ));
    }
    Ok(u.dot(w) / q.sqrt())
}

/// `Phi(-u^T w / sqrt(w^T A w))` with `A` the full quadratic form, signal plus noise.
pub fn limiting_error(w: &DVector<f64>, u: &DVector<f64>, a_err: &DMatrix<f64>) -> Result<f64> {
    Ok(normal_cdf(-theta(w, u, a_err)?))
}

/// Error at the prediction-optimal weight, `Phi(-sqrt(u^T A^-1 u))`.
pub fn optimal_error(u: &DVector<f64>, a_err: &DMatrix<f64>) -> Result<f64> {
    let chol = a_err
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("A is not positive definite", 0.0))?;
    Ok(normal_cdf(-u.dot(&chol.solve(u)).max(0.0).sqrt()))
}

/// `Phi(-sqrt(alpha_K^2 E(1/T)))`. With `mean_inv_t = None` the covariance is
/// taken as the identity.
pub fn bayes_error(alpha_sq_target: f64, mean_inv_t: Option<f64>) -> Result<f64> {
    if !(alpha_sq_target >= 0.0) {
        return Err(Error::Domain("alpha_K^2 must be non-negative".into()));
    }
    Ok(normal_cdf(-bayes_theta(alpha_sq_target, mean_inv_t)))
}

fn bayes_theta(alpha_sq_target: f64, mean_inv_t: Option<f64>) -> f64 {
    (alpha_sq_target * mean_inv_t.unwrap_or(1.0)).sqrt()
}

/// Limiting error of a weight together with the Bayes benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub limiting_error: f64,
    pub bayes_error: Option<f64>,
    pub theta_w: f64,
    pub theta_bayes: Option<f64>,
    pub cos_theta: Option<f64>,
    pub empirical_error: Option<f64>,
    pub auc: Option<f64>,
    /// The weight was negated so that `u^T w >= 0`.
    pub sign_flipped: bool,
}

/// Evaluates a weight. `bayes` is `(alpha_K^2, E(1/T))`, with `None` for the
/// second entry when it cannot be estimated.
pub fn risk_report(
    w: &DVector<f64>,
    u: &DVector<f64>,
    a_err: &DMatrix<f64>,
    bayes: Option<(f64, Option<f64>)>,
) -> Result<RiskReport> {
    let mut t = theta(w, u, a_err)?;
    let sign_flipped = t < 0.0;
    if sign_flipped {
        t = -t;
    }
    let theta_bayes = bayes.and_then(|(a, e)| e.map(|e| bayes_theta(a, Some(e))));
    let cos_theta = theta_bayes.filter(|b| *b > 0.0).map(|b| (t / b).clamp(-1.0, 1.0));
    Ok(RiskReport {
        limiting_error: normal_cdf(-t),
        bayes_error: theta_bayes.map(|b| normal_cdf(-b)),
        theta_w: t,
        theta_bayes,
        cos_theta,
        empirical_error: None,
        auc: None,
        sign_flipped,
    })
}

/// Misclassification rate and AUC on labeled data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalRisk {
    pub error: f64,
    /// `None` when the data hold a single class.
    pub auc: Option<f64>,
}

/// Fraction of `sign(score + intercept)` disagreeing with the labels, with
/// zero mapped to `+1`.
pub fn misclassification(scores: &[f64], intercept: f64, labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data("scores and labels must be nonempty and aligned".into()));
    }
    let wrong = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s + intercept >= 0.0) != (y > 0))
        .count();
    Ok(wrong as f64 / scores.len() as f64)
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels must be aligned".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| labels[o] > 0).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn empirical_error_and_auc(
    direction: &DVector<f64>,
    intercept: f64,
    features: &DMatrix<f64>,
    labels: &[i8],
) -> Result<EmpiricalRisk> {
    if features.ncols() != direction.len() {
        return Err(Error::Contract("direction does not match the feature count".into()));
    }
    let scores: Vec<f64> = (features * direction).iter().copied().collect();
    Ok(EmpiricalRisk {
        error: misclassification(&scores, intercept, labels)?,
        auc: auc(&scores, labels).ok(),
    })
}

/// Per-class aspect ratios `gamma_{k,+} = p/n_{k,+}` and the target class prior.
#[derive(Debug, Clone, PartialEq)]
pub struct UnbalancedDesign {
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
    /// Prior of the positive class in the target test distribution.
    pub pi_plus: f64,
}

impl UnbalancedDesign {
    pub fn from_counts(p: usize, counts: &[(usize, usize)], pi_plus: f64) -> Result<Self> {
        if counts.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Data("every population needs both classes".into()));
        }
        let pf = p as f64;
        Self::new(
            counts.iter().map(|&(a, _)| pf / a as f64).collect(),
            counts.iter().map(|&(_, b)| pf / b as f64).collect(),
            pi_plus,
        )
    }

    pub fn new(gamma_plus: Vec<f64>, gamma_minus: Vec<f64>, pi_plus: f64) -> Result<Self> {
        if gamma_plus.len() != gamma_minus.len() {
            return Err(Error::Contract("one ratio per class and population".into()));
        }
        if gamma_plus.iter().chain(&gamma_minus).any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Contract("class aspect ratios must be positive".into()));
        }
        if !(0.0..=1.0).contains(&pi_plus) {
            return Err(Error::Contract("class prior must lie in [0, 1]".into()));
        }
        Ok(Self {
            gamma_plus,
            gamma_minus,
            pi_plus,
        })
    }

    /// Checks `1/gamma_k = 1/gamma_{k,+} + 1/gamma_{k,-}` against `p/n_k`.
    pub fn check_total(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.gamma_plus.len() {
            return Err(Error::Contract("one total ratio per population".into()));
        }
        for ((g, a), b) in gamma.iter().zip(&self.gamma_plus).zip(&self.gamma_minus) {
            let implied = 1.0 / (1.0 / a + 1.0 / b);
            if (implied - g).abs() > 1e-9 * g.abs().max(1.0) {
                return Err(Error::Contract(format!(
                    "class ratios imply gamma {implied}, not {g}"
                )));
            }
        }
        Ok(())
    }

    /// `p (1/(4 n_plus) + 1/(4 n_minus))` per population.
    pub fn noise_gamma(&self) -> Vec<f64> {
        self.gamma_plus
            .iter()
            .zip(&self.gamma_minus)
            .map(|(a, b)| (a + b) / 4.0)
            .collect()
    }

    /// Limits of the intercepts, `(gamma_- - gamma_+)/4 * tr(R Sigma)/p`.
    pub fn intercept_limits(&self, summaries: &[SpectralSummary<f64>]) -> Result<DVector<f64>> {
        if summaries.len() != self.gamma_plus.len() {
            return Err(Error::Contract("one summary per population".into()));
        }
        Ok(DVector::from_fn(summaries.len(), |k, _| {
            (self.gamma_minus[k] - self.gamma_plus[k]) / 4.0 * summaries[k].trace_r_sigma()
        }))
    }
}

/// `pi_- Phi((-u^T w + b)/s) + pi_+ Phi(-(u^T w + b)/s)` with `s^2 = w^T S w`
/// and `b` the limit of the target's own intercept, which the combined
/// classifier reuses unweighted.
pub fn unbalanced_limiting_error(
    w: &DVector<f64>,
    u: &DVector<f64>,
    s_matrix: &DMatrix<f64>,
    intercept: f64,
    pi_plus: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi_plus) {
        return Err(Error::Contract("class prior must lie in [0, 1]".into()));
    }
    if s_matrix.nrows() != w.len() || s_matrix.ncols() != w.len() || u.len() != w.len() {
        return Err(Error::Contract("weight, u and S must agree on K".into()));
    }
    let q = w.dot(&(s_matrix * w));
    if !(q > 0.0) {
        return Err(Error::Domain("w^T S w must be positive".into()));
    }
    let s = q.sqrt();
    let signal = u.dot(w);
    let pi_minus = 1.0 - pi_plus;
    let mut err = 0.0;
    if pi_minus > 0.0 {
        err += pi_minus * normal_cdf((-signal + intercept) / s);
    }
    if pi_plus > 0.0 {
        err += pi_plus * normal_cdf(-(signal + intercept) / s);
    }
    Ok(err)
}

/// Outcome of the derivative-free weight search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub w: Vec<f64>,
    pub objective: f64,
    /// Best objective after each accepted move.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

pub const SEARCH_BUDGET: usize = 10_000;
const SEARCH_RESTARTS: usize = 3;

/// Coordinate pattern search with a shrinking step, started from each of
/// `starts` and their negatives, then restarted from the incumbent. Returns
/// the best weight seen.
pub fn numeric_weight_search_unbalanced<F>(objective: F, starts: &[DVector<f64>]) -> Result<SearchResult>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let k = starts.first().map(|s| s.len()).unwrap_or(0);
    if k == 0 || starts.iter().any(|s| s.len() != k || !(s.norm() > 0.0)) {
        return Err(Error::Contract("search needs nonzero starting weights of equal length".into()));
    }
    if k > 8 {
        return Err(Error::Contract(format!("search supports K <= 8, got {k}")));
    }
    let evals = std::cell::Cell::new(0usize);
    let eval = |w: &DVector<f64>| {
        evals.set(evals.get() + 1);
        let f = objective(w);
        if f.is_finite() {
            f
        } else {
            f64::INFINITY
        }
    };
    let mut best_w = starts[0].clone();
    let mut best_f = eval(&best_w);
    let mut trace = vec![best_f];
    let mut queue: Vec<Option<DVector<f64>>> = starts.iter().cloned().map(Some).collect();
    queue.extend(starts.iter().map(|s| Some(-s)));
    queue.extend(std::iter::repeat_n(None, SEARCH_RESTARTS));
    for start in queue {
        let mut w = start.unwrap_or_else(|| best_w.clone());
        let mut f = eval(&w);
        let mut step = 0.25 * w.norm();
        let floor = 1e-12 * w.norm();
        while step > floor {
            let mut improved = false;
            for i in 0..k {
                for dir in [1.0, -1.0] {
                    let mut cand = w.clone();
                    cand[i] += dir * step;
                    let fc = eval(&cand);
                    if fc < f {
                        w = cand;
                        f = fc;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
            if evals.get() >= SEARCH_BUDGET {
                break;
            }
        }
        if f < best_f {
            best_f = f;
            best_w = w;
            trace.push(best_f);
        }
        if evals.get() >= SEARCH_BUDGET {
            break;
        }
    }
    Ok(SearchResult {
        w: best_w.iter().copied().collect(),
        objective: best_f,
        trace,
        evaluations: evals.get(),
    })
}

/// Parameters of the pooled-versus-individual comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverParams {
    pub k: usize,
    pub gammas: Vec<f64>,
    pub r: f64,
    pub r_prime: f64,
    pub rho: f64,
    pub alpha_sq: Vec<f64>,
    /// Population spectrum; the identity when `None`.
    pub spectrum: Option<EigenSpectrum<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossoverRow {
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_pooled: f64,
    pub error_individual: f64,
    pub error_pooled: f64,
    /// Direct comparison of the two limiting errors.
    pub pooled_wins: bool,
    /// Closed-form inequality as usually stated, for `rho` in `{0, 1}` only.
    pub stated_condition: Option<bool>,
    /// Exact closed-form inequality, for `rho` in `{0, 1}` and identity covariance.
    pub exact_condition: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossoverReport {
    pub rows: Vec<CrossoverRow>,
    /// Smallest grid ratio at which the pooled classifier has lower error.
    pub gamma_star: Option<f64>,
}

/// `lambda = r (gamma - 1/(r + 1))`.
pub fn crossover_lambda(r: f64, gamma: f64) -> f64 {
    r * (gamma - 1.0 / (r + 1.0))
}

type ConditionFn = fn(usize, f64, f64, f64, f64, &[f64]) -> Option<bool>;

/// The usual closed-form inequalities for `rho = 1` and `rho = 0`.
pub fn stated_condition(k: usize, gamma: f64, r: f64, r_prime: f64, rho: f64, alpha_sq: &[f64]) -> Option<bool> {
    let kf = k as f64;
    let (a, b) = ((1.0 + r).powi(2), (1.0 + r_prime).powi(2));
    if rho == 1.0 {
        let sum: f64 = alpha_sq.iter().sum();
        Some(gamma * gamma * (b - kf * a) >= kf * (gamma * a - 1.0) * sum)
    } else if rho == 0.0 {
        Some(gamma * (b - a) >= kf - 1.0)
    } else {
        None
    }
}

/// Exact comparison of the optimal signal-to-noise ratios under identity
/// covariance, using `m^2/m' = 1 - 1/(gamma (1 + r)^2)` at the chosen `lambda`.
pub fn exact_condition(k: usize, gamma: f64, r: f64, r_prime: f64, rho: f64, alpha_sq: &[f64]) -> Option<bool> {
    let kf = k as f64;
    let (a, b) = ((1.0 + r).powi(2), (1.0 + r_prime).powi(2));
    let q = 1.0 - kf / (gamma * b);
    if rho == 0.0 {
        return Some(kf * a <= b);
    }
    if rho != 1.0 {
        return None;
    }
    let delta = 1.0 / (gamma * a - 1.0);
    let s_ind: f64 = alpha_sq
        .iter()
        .map(|x| x / (delta * x + (1.0 + delta) * gamma))
        .sum();
    let s_pool: f64 = alpha_sq.iter().sum::<f64>() / gamma;
    let ind = (1.0 - 1.0 / (gamma * a)) * s_ind / (1.0 + s_ind);
    let pool = q * s_pool / (1.0 + s_pool);
    Some(pool >= ind)
}

/// Optimal limiting prediction error of one shared-covariance variant.
fn optimal_variant_error(
    variant: Variant,
    hyper: &HyperParams<f64>,
    h: &EigenSpectrum<f64>,
    design: &DesignRatios<f64>,
    lambda: f64,
) -> Result<f64> {
    let k = hyper.k();
    let problem = deterministic_problem(variant, hyper, h, design, &vec![lambda; k])?;
    let w = solve_weights(&problem)?;
    limiting_error(&w.vector(), &problem.u, &problem.system())
}

pub fn crossover_analysis(params: &CrossoverParams) -> Result<CrossoverReport> {
    let k = params.k;
    if k == 0 || params.alpha_sq.len() != k {
        return Err(Error::Contract("need one signal strength per population".into()));
    }
    if !(-1.0..=1.0).contains(&params.rho) {
        return Err(Error::Domain("rho must lie in [-1, 1]".into()));
    }
    let h = params.spectrum.clone().unwrap_or_else(|| EigenSpectrum::identity(1));
    let identity = h.eigenvalues().iter().all(|&t| t == 1.0);
    let hyper = HyperParams::new(
        params.alpha_sq.clone(),
        DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { params.rho }),
        crate::hyper::Provenance::UserSupplied,
    )?;
    let kf = k as f64;
    let mut rows = Vec::with_capacity(params.gammas.len());
    for &gamma in &params.gammas {
        let r_min = ((1.0 - gamma).max(0.0)) / gamma;
        let rp_min = ((kf - gamma).max(0.0)) / gamma;
        if !(params.r > r_min && params.r_prime > rp_min) {
            return Err(Error::Contract(format!(
                "at gamma {gamma} need r > {r_min} and r' > {rp_min}"
            )));
        }
        let lambda = crossover_lambda(params.r, gamma);
        let lambda_pooled = crossover_lambda(params.r_prime, gamma / kf);
        let design = DesignRatios {
            gamma: vec![gamma; k],
            noise: vec![gamma; k],
            pooled_gamma: gamma / kf,
        };
        let error_individual = optimal_variant_error(Variant::PInd, &hyper, &h, &design, lambda)?;
        let error_pooled = optimal_variant_error(Variant::PPool, &hyper, &h, &design, lambda_pooled)?;
        let cond = |f: ConditionFn| {
            f(k, gamma, params.r, params.r_prime, params.rho, &params.alpha_sq)
        };
        rows.push(CrossoverRow {
            gamma,
            lambda,
            lambda_pooled,
            error_individual,
            error_pooled,
            pooled_wins: error_pooled <= error_individual,
            stated_condition: cond(stated_condition),
            exact_condition: if identity { cond(exact_condition) } else { None },
        });
    }
    let gamma_star = rows
        .iter()
        .filter(|r| r.pooled_wins)
        .map(|r| r.gamma)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))));
    Ok(CrossoverReport { rows, gamma_star })
}
