//! Labeled per-population data and the plug-in moments built from it.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::traces::EigenCache;

/// Observations of one population: an `n x p` feature matrix and labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSample {
    features: DMatrix<f64>,
    labels: Vec<i8>,
    population_id: usize,
}

impl PopulationSample {
    /// Checks shapes, label values and finiteness. Class presence is checked when
    /// moments are computed, so single-class test sets are representable.
    pub fn new(features: DMatrix<f64>, labels: Vec<i8>, population_id: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::Data("no features".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(Error::Data(format!("label {bad} is not -1 or +1")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            population_id,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn population_id(&self) -> usize {
        self.population_id
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    /// `(n_plus, n_minus)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let plus = self.labels.iter().filter(|&&y| y == 1).count();
        (plus, self.labels.len() - plus)
    }

    /// Rows selected by index, keeping the population id.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.population_id)
    }
}

/// Per-class means and the half mean difference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub mu_plus: DVector<f64>,
    pub mu_minus: DVector<f64>,
    pub delta_hat: DVector<f64>,
    pub n_plus: usize,
    pub n_minus: usize,
}

impl ClassMeans {
    pub fn p(&self) -> usize {
        self.delta_hat.len()
    }

    pub fn n(&self) -> usize {
        self.n_plus + self.n_minus
    }

    /// `(mu_plus + mu_minus) / 2`.
    pub fn midpoint(&self) -> DVector<f64> {
        (&self.mu_plus + &self.mu_minus) * 0.5
    }

    /// Noise scale of `delta_hat`: `p (1/(4 n_plus) + 1/(4 n_minus))`, which is
    /// `p/n` under balance.
    pub fn gamma_noise(&self) -> f64 {
        self.p() as f64 * (0.25 / self.n_plus as f64 + 0.25 / self.n_minus as f64)
    }
}

pub fn class_means(sample: &PopulationSample) -> Result<ClassMeans> {
    let (n_plus, n_minus) = sample.class_counts();
    if n_plus == 0 || n_minus == 0 {
        return Err(Error::Data(format!(
            "population {} is missing a class ({n_plus} positive, {n_minus} negative)",
            sample.population_id()
        )));
    }
    let p = sample.p();
    let mut mu_plus = DVector::zeros(p);
    let mut mu_minus = DVector::zeros(p);
    for (i, &y) in sample.labels().iter().enumerate() {
        let row = sample.features().row(i).transpose();
        if y == 1 {
            mu_plus += row;
        } else {
            mu_minus += row;
        }
    }
    mu_plus /= n_plus as f64;
    mu_minus /= n_minus as f64;
    let delta_hat = (&mu_plus - &mu_minus) * 0.5;
    Ok(ClassMeans {
        mu_plus,
        mu_minus,
        delta_hat,
        n_plus,
        n_minus,
    })
}

/// Class means, within-class covariance and a lazily built eigendecomposition.
#[derive(Debug)]
pub struct PopulationMoments {
    pub means: ClassMeans,
    sigma_hat: DMatrix<f64>,
    population_id: usize,
    eigen: OnceLock<Result<EigenCache>>,
}

impl Clone for PopulationMoments {
    fn clone(&self) -> Self {
        Self {
            means: self.means.clone(),
            sigma_hat: self.sigma_hat.clone(),
            population_id: self.population_id,
            eigen: self.eigen.clone(),
        }
    }
}

impl PopulationMoments {
    pub fn sigma_hat(&self) -> &DMatrix<f64> {
        &self.sigma_hat
    }

    pub fn population_id(&self) -> usize {
        self.population_id
    }

    pub fn n(&self) -> usize {
        self.means.n()
    }

    pub fn p(&self) -> usize {
        self.means.p()
    }

    /// `p / n_k`.
    pub fn gamma(&self) -> f64 {
        self.p() as f64 / self.n() as f64
    }

    /// `p / (n_k - 2)`, the ratio matching the covariance divisor.
    pub fn gamma_dof(&self) -> f64 {
        self.p() as f64 / (self.n() - 2) as f64
    }

    pub fn eigen(&self) -> Result<&EigenCache> {
        self.eigen
            .get_or_init(|| EigenCache::from_symmetric(&self.sigma_hat, self.gamma_dof()))
            .as_ref()
            .map_err(Clone::clone)
    }
}

pub fn compute_moments(sample: &PopulationSample) -> Result<PopulationMoments> {
    if sample.n() < 3 {
        return Err(Error::Data(format!(
            "population {} has {} observations; at least 3 are needed",
            sample.population_id(),
            sample.n()
        )));
    }
    let means = class_means(sample)?;
    let mut centered = sample.features().clone();
    for (i, &y) in sample.labels().iter().enumerate() {
        let mu = if y == 1 { &means.mu_plus } else { &means.mu_minus };
        let mut row = centered.row_mut(i);
        row -= mu.transpose();
    }
    let sigma_hat = linalg::gram(&centered, 1.0 / (sample.n() - 2) as f64);
    Ok(PopulationMoments {
        means,
        sigma_hat,
        population_id: sample.population_id(),
        eigen: OnceLock::new(),
    })
}

/// Within-class covariance pooled over populations with divisor `sum(n_k - 2)`.
#[derive(Debug)]
pub struct PooledCovariance {
    sigma: DMatrix<f64>,
    dof: usize,
    eigen: OnceLock<Result<EigenCache>>,
}

impl PooledCovariance {
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// `p / sum(n_k - 2)`.
    pub fn gamma(&self) -> f64 {
        self.sigma.nrows() as f64 / self.dof as f64
    }

    pub fn eigen(&self) -> Result<&EigenCache> {
        self.eigen
            .get_or_init(|| EigenCache::from_symmetric(&self.sigma, self.gamma()))
            .as_ref()
            .map_err(Clone::clone)
    }
}

pub fn pooled_covariance(moments: &[PopulationMoments]) -> Result<PooledCovariance> {
    let first = moments
        .first()
        .ok_or_else(|| Error::Contract("no populations to pool".into()))?;
    let p = first.p();
    if moments.iter().any(|m| m.p() != p) {
        return Err(Error::Contract("populations disagree on p".into()));
    }
    if moments.len() == 1 {
        return Ok(PooledCovariance {
            sigma: first.sigma_hat.clone(),
            dof: first.n() - 2,
            eigen: first.eigen.clone(),
        });
    }
    let mut sigma = DMatrix::zeros(p, p);
    let mut dof = 0;
    for m in moments {
        let d = m.n() - 2;
        sigma += &m.sigma_hat * d as f64;
        dof += d;
    }
    sigma /= dof as f64;
    Ok(PooledCovariance {
        sigma,
        dof,
        eigen: OnceLock::new(),
    })
}

/// A ridge discriminant direction and its intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminantDirection {
    pub direction: DVector<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub pooled: bool,
}

impl DiscriminantDirection {
    pub fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.direction
    }
}

/// Solves `(cov + lambda I) d = delta_hat` and sets `b = -d^T (mu_plus + mu_minus)/2`.
pub fn discriminant_direction(
    means: &ClassMeans,
    cov: &DMatrix<f64>,
    lambda: f64,
    pooled: bool,
) -> Result<DiscriminantDirection> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let p = means.p();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::Contract("covariance does not match p".into()));
    }
    let shifted = cov + DMatrix::identity(p, p) * lambda;
    let chol = shifted
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("regularized covariance is not positive definite", lambda))?;
    let direction = chol.solve(&means.delta_hat);
    finish_direction(means, direction, &shifted, lambda, pooled)
}

/// Same as [`discriminant_direction`] using a cached eigendecomposition of `cov`.
pub fn direction_from_cache(
    means: &ClassMeans,
    cache: &EigenCache,
    lambda: f64,
    pooled: bool,
) -> Result<DiscriminantDirection> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let direction = cache.apply_resolvent(lambda, &means.delta_hat);
    if direction.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite direction", f64::NAN));
    }
    let intercept = -direction.dot(&means.midpoint());
    Ok(DiscriminantDirection {
        direction,
        intercept,
        lambda,
        pooled,
    })
}

fn finish_direction(
    means: &ClassMeans,
    direction: DVector<f64>,
    shifted: &DMatrix<f64>,
    lambda: f64,
    pooled: bool,
) -> Result<DiscriminantDirection> {
    let resid = (shifted * &direction - &means.delta_hat).norm();
    let scale = means.delta_hat.norm();
    if direction.iter().any(|x| !x.is_finite()) || resid > 1e-8 * scale {
        return Err(Error::numerical("ridge solve lost accuracy", resid));
    }
    let intercept = -direction.dot(&means.midpoint());
    Ok(DiscriminantDirection {
        direction,
        intercept,
        lambda,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy() -> PopulationSample {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
        PopulationSample::new(x, vec![1, 1, -1, -1], 1).unwrap()
    }

    #[test]
    fn zero_scatter_moments() {
        let m = compute_moments(&toy()).unwrap();
        assert_eq!(m.means.delta_hat, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(m.sigma_hat().abs().max(), 0.0);
        assert_relative_eq!(m.gamma(), 0.5);
        assert_relative_eq!(m.gamma_dof(), 1.0);
    }

    #[test]
    fn missing_class_is_data_error() {
        let x = DMatrix::from_element(4, 2, 1.0);
        let s = PopulationSample::new(x, vec![1; 4], 2).unwrap();
        assert!(matches!(compute_moments(&s), Err(Error::Data(_))));
        let tiny = PopulationSample::new(DMatrix::zeros(2, 2), vec![1, -1], 1).unwrap();
        assert!(matches!(compute_moments(&tiny), Err(Error::Data(_))));
        assert!(PopulationSample::new(DMatrix::zeros(2, 2), vec![1, 0], 1).is_err());
        assert!(PopulationSample::new(DMatrix::from_element(2, 1, f64::NAN), vec![1, -1], 1).is_err());
    }

    #[test]
    fn identity_resolvent_direction() {
        let mut means = compute_moments(&toy()).unwrap().means;
        means.mu_plus = DVector::from_vec(vec![2.0, 1.0]);
        means.mu_minus = DVector::from_vec(vec![0.0, 1.0]);
        means.delta_hat = DVector::from_vec(vec![1.0, 0.0]);
        let d = discriminant_direction(&means, &DMatrix::zeros(2, 2), 1.0, false).unwrap();
        assert_eq!(d.direction, DVector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(d.intercept, -1.0);
        means.delta_hat = DVector::zeros(2);
        let z = discriminant_direction(&means, &DMatrix::zeros(2, 2), 1.0, false).unwrap();
        assert_eq!(z.direction.norm(), 0.0);
        assert_eq!(z.intercept, 0.0);
    }

    #[test]
    fn pooled_single_population_is_identity_map() {
        let x = DMatrix::from_fn(9, 3, |i, j| ((i * 5 + j * 7) % 9) as f64 / 3.0);
        let labels = vec![1, -1, 1, -1, 1, -1, 1, -1, 1];
        let s = PopulationSample::new(x, labels, 1).unwrap();
        let m = compute_moments(&s).unwrap();
        let pooled = pooled_covariance(std::slice::from_ref(&m)).unwrap();
        assert!((pooled.sigma() - m.sigma_hat()).abs().max() < 1e-12);
        let twice = pooled_covariance(&[m.clone(), m.clone()]).unwrap();
        assert!((twice.sigma() - m.sigma_hat()).abs().max() < 1e-12);
    }

    #[test]
    fn cache_direction_matches_cholesky() {
        let x = DMatrix::from_fn(12, 4, |i, j| (((i + 2) * (j + 1) * 13) % 17) as f64 / 5.0);
        let labels = (0..12).map(|i| if i % 3 == 0 { -1 } else { 1 }).collect();
        let s = PopulationSample::new(x, labels, 1).unwrap();
        let m = compute_moments(&s).unwrap();
        let a = discriminant_direction(&m.means, m.sigma_hat(), 0.4, false).unwrap();
        let b = direction_from_cache(&m.means, m.eigen().unwrap(), 0.4, false).unwrap();
        assert!((&a.direction - &b.direction).norm() < 1e-10);
        assert_relative_eq!(a.intercept, b.intercept, epsilon = 1e-10);
    }

    proptest! {
        #[test]
        fn direction_residual_and_scale(
            vals in proptest::collection::vec(-3.0f64..3.0, 24),
            c in -5.0f64..5.0,
            lambda in 0.05f64..10.0,
        ) {
            let x = DMatrix::from_vec(8, 3, vals);
            let labels = vec![1, -1, 1, -1, 1, -1, 1, -1];
            let s = PopulationSample::new(x, labels, 1).unwrap();
            let m = compute_moments(&s).unwrap();
            let sym = m.sigma_hat() - m.sigma_hat().transpose();
            prop_assert!(sym.abs().max() < 1e-12);
            let d = discriminant_direction(&m.means, m.sigma_hat(), lambda, false).unwrap();
            let back = (m.sigma_hat() + DMatrix::identity(3, 3) * lambda) * &d.direction;
            prop_assert!((back - &m.means.delta_hat).norm() <= 1e-8 * m.means.delta_hat.norm().max(1e-12));
            let mut scaled = m.means.clone();
            scaled.delta_hat *= c;
            let ds = discriminant_direction(&scaled, m.sigma_hat(), lambda, false).unwrap();
            prop_assert!((&ds.direction - &d.direction * c).norm() < 1e-9 * (1.0 + d.direction.norm() * c.abs()));
            prop_assert!((ds.intercept - c * d.intercept).abs() < 1e-9 * (1.0 + d.intercept.abs() * c.abs()));
        }
    }
}
