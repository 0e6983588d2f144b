//! Stieltjes-transform quantities of sample covariance spectra at `z = -lambda`,
//! Marchenko-Pastur closed forms, deterministic equivalents for a known
//! population spectrum, and limits of cross-population resolvent traces.
//!
//! Notation: `R = (S + lambda I)^-1` for a sample covariance `S` built with
//! aspect ratio `gamma = p / dof`. `m = tr(R)/p`, `m' = tr(R^2)/p`, and `v`, `v'`
//! are the companion transform and its derivative.

pub mod traces;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;

/// Eigenvalues of a symmetric PSD matrix, stored non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSpectrum<T: Real> {
    eigenvalues: Vec<T>,
    aspect_gamma: T,
}

impl<T: Real> EigenSpectrum<T> {
    /// `aspect_gamma` is `p / dof` of the matrix; use zero for a population matrix.
    pub fn new(mut eigenvalues: Vec<T>, aspect_gamma: T) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Contract("empty spectrum".into()));
        }
        if eigenvalues.iter().any(|l| !l.is_finite() || *l < T::zero()) {
            return Err(Error::Domain("eigenvalues must be finite and non-negative".into()));
        }
        if !aspect_gamma.is_finite() || aspect_gamma < T::zero() {
            return Err(Error::Domain("aspect ratio must be finite and non-negative".into()));
        }
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
        Ok(Self {
            eigenvalues,
            aspect_gamma,
        })
    }

    pub fn population(eigenvalues: Vec<T>) -> Result<Self> {
        Self::new(eigenvalues, T::zero())
    }

    pub fn identity(p: usize) -> Self {
        Self {
            eigenvalues: vec![T::one(); p],
            aspect_gamma: T::zero(),
        }
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn dim_p(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn aspect_gamma(&self) -> T {
        self.aspect_gamma
    }

    fn mean_of(&self, f: impl Fn(T) -> T) -> T {
        let s = self
            .eigenvalues
            .iter()
            .fold(T::zero(), |acc, &l| acc + f(l));
        s / T::from_usize(self.dim_p()).expect("dimension fits scalar")
    }

    fn min_eigenvalue(&self) -> T {
        *self.eigenvalues.last().expect("nonempty")
    }
}

/// Stieltjes quantities at `-lambda` together with the aspect ratio that links
/// `m` to its companion `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary<T: Real> {
    pub lambda: T,
    pub gamma: T,
    pub m: T,
    pub v: T,
    pub m_prime: T,
    pub v_prime: T,
}

fn check_positive<T: Real>(name: &str, x: T) -> Result<()> {
    if x.is_finite() && x > T::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {x}")))
    }
}

impl<T: Real> SpectralSummary<T> {
    /// Completes `(m, m')` with the companion pair:
    /// `v = gamma m + (1 - gamma)/lambda`, `v' = gamma (m' - 1/lambda^2) + 1/lambda^2`.
    pub fn from_stieltjes(gamma: T, lambda: T, m: T, m_prime: T) -> Result<Self> {
        check_positive("lambda", lambda)?;
        check_positive("gamma", gamma)?;
        if !(m > T::zero() && m_prime > T::zero()) {
            return Err(Error::Numerical {
                message: "Stieltjes transform and derivative must be positive".into(),
                residual: m.as_f64().min(m_prime.as_f64()),
            });
        }
        let inv_l = T::one() / lambda;
        let v = gamma * m + (T::one() - gamma) * inv_l;
        let v_prime = gamma * (m_prime - inv_l * inv_l) + inv_l * inv_l;
        Ok(Self {
            lambda,
            gamma,
            m,
            v,
            m_prime,
            v_prime,
        })
    }

    /// Summary for the Marchenko-Pastur law with identity population covariance.
    pub fn mp_identity(gamma: T, lambda: T) -> Result<Self> {
        let m = mp_identity_m(gamma, lambda)?;
        let mp = mp_identity_m_prime(gamma, lambda)?;
        Self::from_stieltjes(gamma, lambda, m, mp)
    }

    /// The deterministic-equivalent scale `x` with `R ~ (x Sigma + lambda I)^-1`.
    pub fn fixed_point(&self) -> T {
        self.lambda * self.v
    }

    /// Limit of `tr(R Sigma)/p`.
    pub fn trace_r_sigma(&self) -> T {
        (T::one() / (self.lambda * self.v) - T::one()) / self.gamma
    }

    /// Limit of `tr(R^2 Sigma)/p`.
    pub fn trace_r2_sigma(&self) -> T {
        let lv = self.lambda * self.v;
        (self.v - self.lambda * self.v_prime) / (self.gamma * lv * lv)
    }

    /// Limit of `tr(R Sigma R Sigma)/p`.
    pub fn trace_r2_sigma2(&self) -> T {
        let v2 = self.v * self.v;
        (self.v_prime - v2) / (self.gamma * self.lambda * self.lambda * v2 * v2)
    }

    /// Limit of `tr(Sigma^-1 R)/p` given `E(1/T)` of the population spectrum.
    pub fn trace_sigma_inv_r(&self, mean_inv_t: T) -> T {
        mean_inv_t / self.lambda - self.v * self.m
    }

    /// Residuals of the two companion relations.
    pub fn companion_residuals(&self) -> (T, T) {
        let inv_l = T::one() / self.lambda;
        let r1 = self.v - (self.gamma * self.m + (T::one() - self.gamma) * inv_l);
        let r2 = self.v_prime - (self.gamma * (self.m_prime - inv_l * inv_l) + inv_l * inv_l);
        (r1, r2)
    }
}

/// `(m, m')` of an arbitrary spectrum at `-lambda`.
pub fn stieltjes_pair<T: Real>(spec: &EigenSpectrum<T>, lambda: T) -> Result<(T, T)> {
    check_positive("lambda", lambda)?;
    let m = spec.mean_of(|l| T::one() / (l + lambda));
    let mp = spec.mean_of(|l| {
        let r = T::one() / (l + lambda);
        r * r
    });
    Ok((m, mp))
}

/// Empirical Stieltjes summary of a sample covariance spectrum.
pub fn stieltjes_from_eigs<T: Real>(spec: &EigenSpectrum<T>, lambda: T) -> Result<SpectralSummary<T>> {
    let (m, mp) = stieltjes_pair(spec, lambda)?;
    if spec.aspect_gamma() <= T::zero() {
        return Err(Error::Contract(
            "companion transform needs a positive aspect ratio".into(),
        ));
    }
    SpectralSummary::from_stieltjes(spec.aspect_gamma(), lambda, m, mp)
}

/// `m(-lambda)` of the Marchenko-Pastur law with ratio `gamma`, in the
/// rationalized form that stays accurate as `gamma -> 0`.
pub fn mp_identity_m<T: Real>(gamma: T, lambda: T) -> Result<T> {
    check_positive("gamma", gamma)?;
    check_positive("lambda", lambda)?;
    let b = T::one() - gamma + lambda;
    let four = T::lit(4.0);
    let disc = (b * b + four * gamma * lambda).sqrt();
    Ok(T::lit(2.0) / (b + disc))
}

pub fn mp_identity_m_prime<T: Real>(gamma: T, lambda: T) -> Result<T> {
    let m = mp_identity_m(gamma, lambda)?;
    Ok(m * m * (T::one() + gamma * m) / (T::one() + gamma * lambda * m * m))
}

const FIXED_POINT_CAP: usize = 10_000;

/// Solves `1 - x = gamma [1 - lambda * mean 1/(x t + lambda)]` for `x` in `(0, 1]`,
/// the mean taken over the eigenvalues `t` of `h`.
pub fn fixed_point_x<T: Real>(h: &EigenSpectrum<T>, gamma: T, lambda: T) -> Result<T> {
    check_positive("gamma", gamma)?;
    check_positive("lambda", lambda)?;
    if h.min_eigenvalue() <= T::zero() {
        return Err(Error::Domain("population spectrum must be strictly positive".into()));
    }
    let f = |x: T| {
        T::one() - x - gamma * (T::one() - lambda * h.mean_of(|t| T::one() / (x * t + lambda)))
    };
    let tol = T::lit(1e-10).max(T::lit(100.0) * T::default_epsilon());
    let (mut lo, mut hi) = (T::lit(1e-12), T::one());
    if f(hi).absval() < tol {
        return Ok(hi);
    }
    let half = T::lit(0.5);
    let mut mid = (lo + hi) * half;
    for _ in 0..FIXED_POINT_CAP {
        mid = (lo + hi) * half;
        if f(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= T::lit(4.0) * T::default_epsilon() * hi {
            break;
        }
    }
    let residual = f(mid);
    if residual.absval() < tol {
        Ok(mid)
    } else {
        Err(Error::numerical("fixed point did not converge", residual.as_f64()))
    }
}

/// Deterministic-equivalent summary for a sample covariance with population
/// spectrum `h` and aspect ratio `gamma`.
pub fn deterministic_summary<T: Real>(
    h: &EigenSpectrum<T>,
    gamma: T,
    lambda: T,
) -> Result<SpectralSummary<T>> {
    let x = fixed_point_x(h, gamma, lambda)?;
    let m = h.mean_of(|t| T::one() / (x * t + lambda));
    let i1 = h.mean_of(|t| {
        let r = T::one() / (x * t + lambda);
        t * r * r
    });
    let i2 = h.mean_of(|t| {
        let r = T::one() / (x * t + lambda);
        r * r
    });
    let m_prime = (gamma * m * i1 + i2) / (T::one() + gamma * lambda * i1);
    SpectralSummary::from_stieltjes(gamma, lambda, m, m_prime)
}

/// `E(1/T)` of a population spectrum.
pub fn mean_inv_t<T: Real>(h: &EigenSpectrum<T>) -> Result<T> {
    if h.min_eigenvalue() <= T::zero() {
        return Err(Error::Domain("population spectrum must be strictly positive".into()));
    }
    Ok(h.mean_of(|t| T::one() / t))
}

/// Which weight sits between the two resolvents in a cross trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum CrossTraceKind {
    /// Identity weight, shared covariance.
    E,
    /// Population covariance weight, shared covariance.
    M,
    /// Identity weight, population-specific covariances.
    U,
    /// Target covariance weight, population-specific covariances.
    Y,
}

impl CrossTraceKind {
    pub fn weighted(self) -> bool {
        matches!(self, CrossTraceKind::M | CrossTraceKind::Y)
    }
}

/// Limit of `tr(R_a R_b W)/p` for independent samples from the same population
/// spectrum `h`, with `W = I` or `W = Sigma`.
pub fn deterministic_cross<T: Real>(
    h: &EigenSpectrum<T>,
    a: &SpectralSummary<T>,
    b: &SpectralSummary<T>,
    weighted: bool,
) -> T {
    let (xa, xb) = (a.fixed_point(), b.fixed_point());
    h.mean_of(|t| {
        let w = if weighted { t } else { T::one() };
        w / ((xa * t + a.lambda) * (xb * t + b.lambda))
    })
}

/// Regime selector for the cross-trace closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedFormCase {
    /// Same aspect ratio and regularizer in both populations.
    Equal,
    /// Identity population covariance.
    Identity,
    /// General parameters; a removable singularity at `v_a = v_b`.
    Anisotropic,
}

fn same_params<T: Real>(a: &SpectralSummary<T>, b: &SpectralSummary<T>) -> bool {
    let close = |x: T, y: T| (x - y).absval() <= T::lit(1e-12) * x.absval().max(y.absval());
    close(a.gamma, b.gamma) && close(a.lambda, b.lambda)
}

fn near_degenerate<T: Real>(a: &SpectralSummary<T>, b: &SpectralSummary<T>) -> bool {
    (a.v - b.v).absval() < T::lit(1e-8) * a.v.absval().max(b.v.absval())
}

fn closed_form_equal<T: Real>(s: &SpectralSummary<T>, weighted: bool) -> T {
    let (g, l, m, mp) = (s.gamma, s.lambda, s.m, s.m_prime);
    let den = T::one() - g + g * l * l * mp;
    if weighted {
        (m - l * mp) / den
    } else {
        ((T::one() - g) * mp + T::lit(2.0) * g * l * m * mp - g * m * m) / den
    }
}

fn closed_form_generic<T: Real>(
    case: ClosedFormCase,
    a: &SpectralSummary<T>,
    b: &SpectralSummary<T>,
    weighted: bool,
) -> Result<T> {
    match case {
        ClosedFormCase::Equal => {
            if !same_params(a, b) {
                return Err(Error::Contract(
                    "equal case needs matching gamma and lambda".into(),
                ));
            }
            Ok(closed_form_equal(a, weighted))
        }
        ClosedFormCase::Identity => Ok(a.m * b.m),
        ClosedFormCase::Anisotropic => {
            if near_degenerate(a, b) {
                if same_params(a, b) {
                    return Ok(closed_form_equal(a, weighted));
                }
                return Err(Error::SingularCase(
                    "companion transforms coincide; use the equal-parameter branch".into(),
                ));
            }
            let den = a.lambda * b.lambda * (a.v - b.v);
            let num = if weighted {
                b.lambda * b.m - a.lambda * a.m
            } else {
                a.v * a.lambda * a.m - b.v * b.lambda * b.m
            };
            Ok(num / den)
        }
    }
}

/// Closed-form limit of `tr(R_a R_b)/p`.
pub fn closed_form_e<T: Real>(
    case: ClosedFormCase,
    a: &SpectralSummary<T>,
    b: &SpectralSummary<T>,
) -> Result<T> {
    closed_form_generic(case, a, b, false)
}

/// Closed-form limit of `tr(R_a R_b Sigma)/p`.
pub fn closed_form_m<T: Real>(
    case: ClosedFormCase,
    a: &SpectralSummary<T>,
    b: &SpectralSummary<T>,
) -> Result<T> {
    closed_form_generic(case, a, b, true)
}

/// Estimates `E(1/T)` from a sample covariance spectrum with `gamma < 1`.
pub fn est_mean_inv_t<T: Real>(sample: &EigenSpectrum<T>, gamma: T) -> Result<T> {
    if gamma >= T::one() {
        return Err(Error::UnsupportedRegime(format!(
            "E(1/T) needs gamma < 1 (got {gamma}); pool covariances or use a prediction weight"
        )));
    }
    if sample.min_eigenvalue() <= T::zero() {
        return Err(Error::numerical(
            "sample covariance is singular",
            sample.min_eigenvalue().as_f64(),
        ));
    }
    let g = if gamma < T::zero() { T::zero() } else { gamma };
    Ok((T::one() - g) * sample.mean_of(|l| T::one() / l))
}

/// Target-side estimate of `tr(R_K R_k W)/p` for `W` the target covariance:
/// `(m_k - lambda_K tr(R_K R_k)/p) / x`.
pub fn est_target_side<T: Real>(trace_r_other: T, cross_e: T, lambda_target: T, x: T) -> Result<T> {
    if !(x > T::zero()) {
        return Err(Error::Contract(format!("fixed point must be positive, got {x}")));
    }
    Ok((trace_r_other - lambda_target * cross_e) / x)
}
