//! Signal strengths and cross-population correlations of the random class-mean offsets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sample::ClassMeans;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Estimated,
    UserSupplied,
}

/// `alpha_sq[k]` and the unit-diagonal correlation matrix `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "HyperParamsRepr<T>", into = "HyperParamsRepr<T>")]
pub struct HyperParams<T: Real> {
    alpha_sq: Vec<T>,
    rho: DMatrix<T>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct HyperParamsRepr<T: Real> {
    alpha_sq: Vec<T>,
    rho: Vec<Vec<T>>,
    #[serde(default = "user_supplied")]
    provenance: Provenance,
}

fn user_supplied() -> Provenance {
    Provenance::UserSupplied
}

impl<T: Real> TryFrom<HyperParamsRepr<T>> for HyperParams<T> {
    type Error = Error;

    fn try_from(r: HyperParamsRepr<T>) -> Result<Self> {
        let k = r.rho.len();
        if r.rho.iter().any(|row| row.len() != k) {
            return Err(Error::Contract("rho must be square".into()));
        }
        let rho = DMatrix::from_fn(k, k, |i, j| r.rho[i][j]);
        Self::new(r.alpha_sq, rho, r.provenance)
    }
}

impl<T: Real> From<HyperParams<T>> for HyperParamsRepr<T> {
    fn from(h: HyperParams<T>) -> Self {
        let k = h.k();
        Self {
            rho: (0..k).map(|i| (0..k).map(|j| h.rho[(i, j)]).collect()).collect(),
            alpha_sq: h.alpha_sq,
            provenance: h.provenance,
        }
    }
}

impl<T: Real> HyperParams<T> {
    /// Validates ranges and symmetry. Positive semidefiniteness is checked
    /// separately, see [`HyperParams::is_psd`] and [`project_psd`].
    pub fn new(alpha_sq: Vec<T>, rho: DMatrix<T>, provenance: Provenance) -> Result<Self> {
        let k = alpha_sq.len();
        if k == 0 || rho.nrows() != k || rho.ncols() != k {
            return Err(Error::Contract(format!(
                "need {k} signal strengths and a {k}x{k} correlation matrix"
            )));
        }
        if alpha_sq.iter().any(|a| !a.is_finite() || *a < T::zero()) {
            return Err(Error::Domain("alpha_sq must be finite and non-negative".into()));
        }
        let tol = T::lit(1e-12).max(T::lit(10.0) * T::default_epsilon());
        for i in 0..k {
            if (rho[(i, i)] - T::one()).absval() > tol {
                return Err(Error::Domain("rho must have a unit diagonal".into()));
            }
            for j in 0..k {
                let r = rho[(i, j)];
                if !r.is_finite() || r.absval() > T::one() + tol {
                    return Err(Error::Domain("correlations must lie in [-1, 1]".into()));
                }
                if (r - rho[(j, i)]).absval() > tol {
                    return Err(Error::Domain("rho must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            alpha_sq,
            rho,
            provenance,
        })
    }

    /// Common signal strength `alpha_sq` and correlation `rho` for `k` populations.
    pub fn equicorrelated(k: usize, alpha_sq: T, rho: T) -> Result<Self> {
        let r = DMatrix::from_fn(k, k, |i, j| if i == j { T::one() } else { rho });
        Self::new(vec![alpha_sq; k], r, Provenance::UserSupplied)
    }

    pub fn k(&self) -> usize {
        self.alpha_sq.len()
    }

    pub fn alpha_sq(&self) -> &[T] {
        &self.alpha_sq
    }

    pub fn rho(&self) -> &DMatrix<T> {
        &self.rho
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `[rho_kk' alpha_k alpha_k']`.
    pub fn cross_covariance(&self) -> DMatrix<T> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| {
            self.rho[(i, j)] * (self.alpha_sq[i] * self.alpha_sq[j]).sqrt()
        })
    }

    pub fn is_psd(&self) -> bool {
        let c = self.cross_covariance();
        let min = c.symmetric_eigenvalues().min();
        min >= -T::lit(1e-8)
    }
}

/// `max(0, ||delta_hat||^2 - p (1/(4 n_plus) + 1/(4 n_minus)))`.
pub fn estimate_alpha_sq(means: &ClassMeans) -> f64 {
    (means.delta_hat.norm_squared() - means.gamma_noise()).max(0.0)
}

/// `clip(delta_hat_a . delta_hat_b / sqrt(alpha_a alpha_b), -1, 1)`.
pub fn estimate_rho(a: &ClassMeans, b: &ClassMeans, alpha_sq_a: f64, alpha_sq_b: f64) -> Result<f64> {
    if a.p() != b.p() {
        return Err(Error::Contract("populations disagree on p".into()));
    }
    if !(alpha_sq_a > 0.0 && alpha_sq_b > 0.0) {
        return Err(Error::Domain(
            "correlation is undefined when a signal strength is zero".into(),
        ));
    }
    let r = a.delta_hat.dot(&b.delta_hat) / (alpha_sq_a * alpha_sq_b).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Moment estimates for all populations, projected to a valid correlation matrix.
/// Pairs involving a zero signal strength get zero correlation.
pub fn estimate_hyper(means: &[ClassMeans]) -> Result<HyperParams<f64>> {
    let alpha: Vec<f64> = means.iter().map(estimate_alpha_sq).collect();
    let k = means.len();
    let mut rho = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let r = match estimate_rho(&means[i], &means[j], alpha[i], alpha[j]) {
                Ok(r) => r,
                Err(Error::Domain(_)) => 0.0,
                Err(e) => return Err(e),
            };
            rho[(i, j)] = r;
            rho[(j, i)] = r;
        }
    }
    let h = HyperParams::new(alpha, rho, Provenance::Estimated)?;
    Ok(project_psd(&h))
}

/// Clips negative eigenvalues of `rho` and rescales to a unit diagonal. Since
/// `[rho alpha alpha^T]` is congruent to `rho` when all strengths are positive,
/// this makes the cross covariance PSD as well.
pub fn project_psd<T: Real>(h: &HyperParams<T>) -> HyperParams<T> {
    let k = h.k();
    let eig = h.rho.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= T::zero() {
        return h.clone();
    }
    let clipped = eig.eigenvalues.map(|e| e.max(T::zero()));
    let q = &eig.eigenvectors;
    let plus = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let rho = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            return T::one();
        }
        let d = (plus[(i, i)] * plus[(j, j)]).sqrt();
        if d > T::zero() {
            let r = plus[(i, j)] / d;
            r.max(-T::one()).min(T::one())
        } else {
            T::zero()
        }
    });
    HyperParams {
        alpha_sq: h.alpha_sq.clone(),
        rho: (&rho + rho.transpose()) * T::lit(0.5),
        provenance: h.provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn means(delta: Vec<f64>, n_plus: usize, n_minus: usize) -> ClassMeans {
        let d = DVector::from_vec(delta);
        ClassMeans {
            mu_plus: &d * 0.5,
            mu_minus: &d * -0.5,
            delta_hat: d,
            n_plus,
            n_minus,
        }
    }

    #[test]
    fn pure_noise_floor() {
        // p = 50, n = 100 balanced: gamma = 0.5.
        let m = means(vec![0.0; 50], 50, 50);
        assert_eq!(m.gamma_noise(), 0.5);
        assert_eq!(estimate_alpha_sq(&m), 0.0);
    }

    #[test]
    fn large_n_recovers_norm() {
        let m = means(vec![0.1; 20], 10_000_000, 10_000_000);
        assert!((estimate_alpha_sq(&m) - 0.2).abs() < 1e-5);
    }

    #[test]
    fn identical_noiseless_offsets_are_perfectly_correlated() {
        let m = means(vec![0.3, -0.2, 0.5], 1 << 40, 1 << 40);
        let a = m.delta_hat.norm_squared();
        assert!((estimate_rho(&m, &m, a, a).unwrap() - 1.0).abs() < 1e-12);
        assert!(estimate_rho(&m, &m, 0.0, a).is_err());
    }

    #[test]
    fn two_by_two_projection_clips_to_one() {
        let rho = DMatrix::from_row_slice(2, 2, &[1.0_f64, 1.2, 1.2, 1.0]);
        let h = HyperParams {
            alpha_sq: vec![0.5, 0.5],
            rho,
            provenance: Provenance::Estimated,
        };
        let p = project_psd(&h);
        assert!((p.rho()[(0, 1)] - 1.0).abs() < 1e-12);
        assert!(p.is_psd());
    }

    #[test]
    fn rejects_bad_input() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(HyperParams::new(vec![1.0, 1.0], bad, Provenance::UserSupplied).is_err());
        assert!(HyperParams::<f64>::equicorrelated(3, -1.0, 0.5).is_err());
        assert!(HyperParams::<f64>::equicorrelated(3, 1.0, 1.5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let h = HyperParams::<f64>::equicorrelated(3, 0.5, 0.25).unwrap();
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("\"provenance\":\"user_supplied\""));
        let back: HyperParams<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        let unknown = r#"{"alpha_sq":[1.0],"rho":[[1.0]],"extra":1}"#;
        assert!(serde_json::from_str::<HyperParams<f64>>(unknown).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_psd_and_idempotent(vals in proptest::collection::vec(-1.0f64..1.0, 15)) {
            let k = 6;
            let mut rho = DMatrix::identity(k, k);
            let mut it = vals.into_iter();
            for i in 0..k {
                for j in (i + 1)..k {
                    let r = it.next().unwrap();
                    rho[(i, j)] = r;
                    rho[(j, i)] = r;
                }
            }
            let h = HyperParams::new(vec![0.7; k], rho, Provenance::Estimated).unwrap();
            let p1 = project_psd(&h);
            prop_assert!(p1.rho().clone().symmetric_eigenvalues().min() >= -1e-10);
            let p2 = project_psd(&p1);
            let diff = (p2.rho() - p1.rho()).abs().max();
            prop_assert!(diff < 1e-12 || p1.rho().clone().symmetric_eigenvalues().min() < 0.0 && diff < 1e-9);
        }

        #[test]
        fn alpha_estimate_permutation_invariant(
            vals in proptest::collection::vec(-2.0f64..2.0, 18),
            seed in 0usize..100,
        ) {
            use crate::sample::{class_means, PopulationSample};
            let x = DMatrix::from_vec(6, 3, vals);
            let labels = vec![1, 1, 1, -1, -1, -1];
            let s = PopulationSample::new(x.clone(), labels.clone(), 1).unwrap();
            // Swap two rows within the positive class.
            let (a, b) = (seed % 3, (seed / 3) % 3);
            let mut order: Vec<usize> = (0..6).collect();
            order.swap(a, b);
            let t = s.subset(&order).unwrap();
            let ea = estimate_alpha_sq(&class_means(&s).unwrap());
            let eb = estimate_alpha_sq(&class_means(&t).unwrap());
            prop_assert!((ea - eb).abs() < 1e-12);
        }
    }
}
