//! Synthetic two-class Gaussian mixtures with correlated class-mean offsets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{HyperParams, Provenance};
use crate::linalg;
use crate::sample::PopulationSample;

/// Population covariance family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovKind {
    Identity,
    /// `Sigma_ij = t^|i - j|`.
    Ar1Toeplitz {
        #[serde(default = "default_toeplitz")]
        t: f64,
    },
    /// Diagonal covariance with the given eigenvalues.
    CustomEigs { eigenvalues: Vec<f64> },
}

fn default_toeplitz() -> f64 {
    0.5
}

/// Cross-population correlation: one value for every pair or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    Common(f64),
    Matrix(Vec<Vec<f64>>),
}

fn default_balance() -> Vec<f64> {
    Vec::new()
}

fn default_n_test() -> usize {
    2000
}

/// Simulation settings. The last population is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub n: Vec<usize>,
    pub alpha_sq: Vec<f64>,
    pub rho: RhoSpec,
    #[serde(default = "identity_kind")]
    pub cov_kind: CovKind,
    /// Per-population covariances overriding `cov_kind`.
    #[serde(default)]
    pub heterogeneous_cov: Option<Vec<CovKind>>,
    /// `P(y = +1)` per population; empty means balanced.
    #[serde(default = "default_balance")]
    pub class_balance: Vec<f64>,
    /// Norm of the common class midpoint of each population.
    #[serde(default)]
    pub mu_bar_scale: f64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Positive-class share of the test set; defaults to the target's.
    #[serde(default)]
    pub test_class_balance: Option<f64>,
    /// Raises the target eigenvalues to this power (renormalized to unit mean)
    /// for the test distribution only.
    #[serde(default)]
    pub test_spectrum_power: Option<f64>,
    /// Eigenvectors of the shifted test covariance.
    #[serde(default)]
    pub test_basis: TestBasis,
    /// Exact class counts instead of i.i.d. labels.
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn identity_kind() -> CovKind {
    CovKind::Identity
}

impl SimConfig {
    /// `p = 150`, `n = 150, 140, ..., 100`, Toeplitz(0.5), `alpha^2 = 0.5`,
    /// `rho = 0.5`, 2000 balanced test points.
    pub fn validation_preset() -> Self {
        Self {
            p: 150,
            n: (0..6).map(|i| 150 - 10 * i).collect(),
            alpha_sq: vec![0.5; 6],
            rho: RhoSpec::Common(0.5),
            cov_kind: CovKind::Ar1Toeplitz { t: 0.5 },
            heterogeneous_cov: None,
            class_balance: Vec::new(),
            mu_bar_scale: 0.0,
            n_test: 2000,
            test_class_balance: None,
            test_spectrum_power: None,
            test_basis: TestBasis::Shared,
            stratified: true,
            seed: 0,
        }
    }

    /// `p = 150`, `n = 250, 240, ..., 160`, Toeplitz(0.5) training covariance
    /// and a faster-decaying test spectrum on the coordinate axes.
    pub fn robustness_preset() -> Self {
        Self {
            n: (0..10).map(|i| 250 - 10 * i).collect(),
            alpha_sq: vec![0.5; 10],
            test_spectrum_power: Some(ROBUSTNESS_TEST_POWER),
            test_basis: TestBasis::Coordinate,
            ..Self::validation_preset()
        }
    }

    pub fn k(&self) -> usize {
        self.n.len()
    }

    pub fn pi_plus(&self, k: usize) -> f64 {
        self.class_balance.get(k).copied().unwrap_or(0.5)
    }

    pub fn hyper(&self) -> Result<HyperParams<f64>> {
        let k = self.k();
        let rho = match &self.rho {
            RhoSpec::Common(r) => DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { *r }),
            RhoSpec::Matrix(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::Contract(format!("rho must be {k} x {k}")));
                }
                DMatrix::from_fn(k, k, |i, j| rows[i][j])
            }
        };
        HyperParams::new(self.alpha_sq.clone(), rho, Provenance::UserSupplied)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.p == 0 || k == 0 {
            return Err(Error::Contract("p and the population count must be positive".into()));
        }
        if self.alpha_sq.len() != k {
            return Err(Error::Contract("one alpha_sq per population".into()));
        }
        if self.n.iter().any(|&n| n < 3) {
            return Err(Error::Contract("every population needs at least 3 observations".into()));
        }
        if !self.class_balance.is_empty() && self.class_balance.len() != k {
            return Err(Error::Contract("class_balance needs one entry per population".into()));
        }
        let priors = self.class_balance.iter().chain(self.test_class_balance.iter());
        for &pi in priors {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Contract(format!("class prior {pi} outside (0, 1)")));
            }
        }
        if let Some(h) = &self.heterogeneous_cov {
            if h.len() != k {
                return Err(Error::Contract("heterogeneous_cov needs one entry per population".into()));
            }
        }
        let cap = (self.p as f64).powf(0.4);
        if !(self.mu_bar_scale >= 0.0 && self.mu_bar_scale <= cap) {
            return Err(Error::Contract(format!(
                "mu_bar_scale must lie in [0, {cap:.3}] (p^0.4)"
            )));
        }
        if let Some(power) = self.test_spectrum_power {
            if !(power > 0.0 && power.is_finite()) {
                return Err(Error::Contract("test_spectrum_power must be positive".into()));
            }
        }
        let h = self.hyper()?;
        if !h.is_psd() {
            return Err(Error::Contract("[rho alpha alpha^T] is not PSD".into()));
        }
        Ok(())
    }

    pub fn cov_kind_of(&self, k: usize) -> &CovKind {
        self.heterogeneous_cov
            .as_ref()
            .map(|h| &h[k])
            .unwrap_or(&self.cov_kind)
    }
}

/// Where the shifted test covariance puts its eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestBasis {
    /// Same eigenvectors as the target training covariance.
    #[default]
    Shared,
    /// Diagonal, largest eigenvalue on the first coordinate.
    Coordinate,
}

pub const ROBUSTNESS_TEST_POWER: f64 = 3.0;

/// A population covariance with its eigendecomposition and square root.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Eigenvalues in non-decreasing order.
    pub eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    /// `None` for the identity.
    root: Option<DMatrix<f64>>,
}

impl Covariance {
    pub fn build(kind: &CovKind, p: usize) -> Result<Self> {
        match kind {
            CovKind::Identity => Ok(Self {
                matrix: DMatrix::identity(p, p),
                eigenvalues: vec![1.0; p],
                eigenvectors: DMatrix::identity(p, p),
                root: None,
            }),
            CovKind::Ar1Toeplitz { t } => {
                if !(t.abs() < 1.0) {
                    return Err(Error::Contract(format!("Toeplitz parameter {t} outside (-1, 1)")));
                }
                let m = DMatrix::from_fn(p, p, |i, j| t.powi(i.abs_diff(j) as i32));
                Self::from_matrix(m)
            }
            CovKind::CustomEigs { eigenvalues } => {
                if eigenvalues.len() != p || eigenvalues.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                    return Err(Error::Contract(format!("custom_eigs needs {p} positive eigenvalues")));
                }
                Self::from_matrix(DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)))
            }
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let (values, vectors) = linalg::symmetric_eigen(&matrix)?;
        if values[0] <= 0.0 {
            return Err(Error::Contract("population covariance must be positive definite".into()));
        }
        let q = linalg::to_dmatrix(vectors.as_ref());
        Ok(Self::from_eigen(values, q))
    }

    fn from_eigen(eigenvalues: Vec<f64>, eigenvectors: DMatrix<f64>) -> Self {
        let sqrt = DVector::from_iterator(eigenvalues.len(), eigenvalues.iter().map(|l| l.sqrt()));
        let root = &eigenvectors * DMatrix::from_diagonal(&sqrt) * eigenvectors.transpose();
        let d = DVector::from_column_slice(&eigenvalues);
        let matrix = &eigenvectors * DMatrix::from_diagonal(&d) * eigenvectors.transpose();
        Self {
            matrix: (&matrix + matrix.transpose()) * 0.5,
            eigenvalues,
            eigenvectors,
            root: Some((&root + root.transpose()) * 0.5),
        }
    }

    /// Same eigenvectors with eigenvalues `l^power`, rescaled to unit mean.
    pub fn with_spectrum_power(&self, power: f64) -> Self {
        let raw: Vec<f64> = self.eigenvalues.iter().map(|l| l.powf(power)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let scaled = raw.into_iter().map(|l| l / mean).collect();
        Self::from_eigen(scaled, self.eigenvectors.clone())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_identity(&self) -> bool {
        self.root.is_none()
    }

    /// Rows of `z` mapped to `N(0, Sigma)` draws.
    pub fn color(&self, z: DMatrix<f64>) -> DMatrix<f64> {
        match &self.root {
            None => z,
            Some(r) => z * r,
        }
    }

    /// `E(1/T)` of the spectrum.
    pub fn mean_inv(&self) -> f64 {
        self.eigenvalues.iter().map(|l| 1.0 / l).sum::<f64>() / self.dim() as f64
    }
}

/// One simulated training set plus held-out target data and the ground truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub train: Vec<PopulationSample>,
    pub test: Option<PopulationSample>,
    pub deltas: Vec<DVector<f64>>,
    pub mu_bar: Vec<DVector<f64>>,
    pub covariances: Vec<std::sync::Arc<Covariance>>,
    pub test_covariance: std::sync::Arc<Covariance>,
}

impl SimDataset {
    pub fn target_delta(&self) -> &DVector<f64> {
        self.deltas.last().expect("at least one population")
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so the stream order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Draws `(delta_1, ..., delta_K)` coordinatewise from `N(0, [rho alpha alpha^T]/p)`.
pub fn draw_deltas(config: &SimConfig) -> Result<Vec<DVector<f64>>> {
    let hyper = config.hyper()?;
    let k = hyper.k();
    let c = hyper.cross_covariance();
    let eig = c.symmetric_eigen();
    if eig.eigenvalues.min() < -1e-8 {
        return Err(Error::Contract("[rho alpha alpha^T] is not PSD".into()));
    }
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    let mut rng = stream(config.seed, 0);
    let z = normals(&mut rng, config.p, k);
    let scale = 1.0 / (config.p as f64).sqrt();
    let coords = z * root.transpose() * scale;
    Ok((0..k).map(|j| coords.column(j).into_owned()).collect())
}

fn draw_mu_bar(config: &SimConfig) -> Vec<DVector<f64>> {
    let mut rng = stream(config.seed, 0x6d75);
    (0..config.k())
        .map(|_| {
            if config.mu_bar_scale == 0.0 {
                return DVector::zeros(config.p);
            }
            let g = DVector::from_iterator(config.p, (0..config.p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let norm = g.norm();
            g * (config.mu_bar_scale / norm)
        })
        .collect()
}

fn draw_labels(rng: &mut impl Rng, n: usize, pi_plus: f64, stratified: bool) -> Vec<i8> {
    if stratified {
        let n_plus = ((pi_plus * n as f64).round() as usize).clamp(1, n - 1);
        let mut labels: Vec<i8> = (0..n).map(|i| if i < n_plus { 1 } else { -1 }).collect();
        // Interleave deterministically via a seeded shuffle.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        labels
    } else {
        (0..n).map(|_| if rng.random::<f64>() < pi_plus { 1 } else { -1 }).collect()
    }
}

fn draw_rows(
    rng: &mut impl Rng,
    labels: &[i8],
    mu_bar: &DVector<f64>,
    delta: &DVector<f64>,
    cov: &Covariance,
) -> DMatrix<f64> {
    let p = cov.dim();
    let mut x = cov.color(normals(rng, labels.len(), p));
    for (i, &y) in labels.iter().enumerate() {
        let shift = mu_bar + delta * f64::from(y);
        let mut row = x.row_mut(i);
        row += shift.transpose();
    }
    x
}

/// Training sample of population `k` (0-based), ids are 1-based.
pub fn draw_population(
    config: &SimConfig,
    k: usize,
    deltas: &[DVector<f64>],
    mu_bar: &DVector<f64>,
    cov: &Covariance,
) -> Result<PopulationSample> {
    let mut rng = stream(config.seed, 1 + k as u64);
    let labels = draw_labels(&mut rng, config.n[k], config.pi_plus(k), config.stratified);
    let x = draw_rows(&mut rng, &labels, mu_bar, &deltas[k], cov);
    PopulationSample::new(x, labels, k + 1)
}

/// Draws every population and the target test set.
pub fn simulate(config: &SimConfig) -> Result<SimDataset> {
    config.validate()?;
    let k = config.k();
    let deltas = draw_deltas(config)?;
    let mu_bar = draw_mu_bar(config);
    let shared = std::sync::Arc::new(Covariance::build(&config.cov_kind, config.p)?);
    let covariances = (0..k)
        .map(|i| match &config.heterogeneous_cov {
            Some(h) => Covariance::build(&h[i], config.p).map(std::sync::Arc::new),
            None => Ok(shared.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let train = (0..k)
        .into_par_iter()
        .map(|i| draw_population(config, i, &deltas, &mu_bar[i], &covariances[i]))
        .collect::<Result<Vec<_>>>()?;
    let target_cov = covariances[k - 1].clone();
    let test_covariance = match (config.test_spectrum_power, config.test_basis) {
        (Some(power), TestBasis::Shared) => std::sync::Arc::new(target_cov.with_spectrum_power(power)),
        (Some(power), TestBasis::Coordinate) => {
            let shifted = target_cov.with_spectrum_power(power);
            let mut eigs = shifted.eigenvalues.clone();
            eigs.reverse();
            std::sync::Arc::new(Covariance::build(&CovKind::CustomEigs { eigenvalues: eigs }, config.p)?)
        }
        (None, _) => target_cov,
    };
    let test = if config.n_test == 0 {
        None
    } else {
        let mut rng = stream(config.seed, 1 + k as u64);
        // Skip past the target's training stream by using a distinct word position.
        rng.set_word_pos(1 << 60);
        let pi = config.test_class_balance.unwrap_or(config.pi_plus(k - 1));
        let labels = draw_labels(&mut rng, config.n_test.max(2), pi, config.stratified);
        let labels = labels[..config.n_test.max(1)].to_vec();
        let x = draw_rows(&mut rng, &labels, &mu_bar[k - 1], &deltas[k - 1], &test_covariance);
        Some(PopulationSample::new(x, labels, k)?)
    };
    Ok(SimDataset {
        train,
        test,
        deltas,
        mu_bar,
        covariances,
        test_covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::compute_moments;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            p: 40,
            n: vec![60, 50, 40],
            alpha_sq: vec![0.5; 3],
            rho: RhoSpec::Common(0.5),
            n_test: 100,
            seed,
            ..SimConfig::validation_preset()
        }
    }

    #[test]
    fn presets_match_protocol_sizes() {
        let c = SimConfig::validation_preset();
        assert_eq!(c.n, vec![150, 140, 130, 120, 110, 100]);
        assert_eq!(c.n_test, 2000);
        let r = SimConfig::robustness_preset();
        assert_eq!(r.n.first(), Some(&250));
        assert_eq!(r.n.last(), Some(&160));
        c.validate().unwrap();
        r.validate().unwrap();
    }

    #[test]
    fn deterministic_under_seed() {
        let a = simulate(&small(3)).unwrap();
        let b = simulate(&small(3)).unwrap();
        let c = simulate(&small(4)).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x, y);
        }
        assert_eq!(a.test, b.test);
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn perfectly_correlated_offsets_coincide() {
        let c = SimConfig {
            rho: RhoSpec::Common(1.0),
            ..small(1)
        };
        let d = draw_deltas(&c).unwrap();
        assert!((&d[0] - &d[2]).norm() < 1e-6);
    }

    #[test]
    fn offset_norms_concentrate() {
        let p = 2000;
        let c = SimConfig {
            p,
            alpha_sq: vec![0.5, 1.0, 2.0],
            rho: RhoSpec::Common(0.0),
            ..small(9)
        };
        for seed in 0..5 {
            let d = draw_deltas(&SimConfig { seed, ..c.clone() }).unwrap();
            for (delta, a) in d.iter().zip(&c.alpha_sq) {
                assert!((delta.norm_squared() - a).abs() < 3.0 * (2.0 / p as f64).sqrt() * a);
            }
            let cross = d[0].dot(&d[1]) / (0.5f64 * 1.0).sqrt();
            assert!(cross.abs() < 3.0 / (p as f64).sqrt());
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = small(0);
        c.rho = RhoSpec::Common(-0.9);
        assert!(matches!(simulate(&c), Err(Error::Contract(_))));
        let mut c = small(0);
        c.class_balance = vec![0.5, 1.0, 0.5];
        assert!(c.validate().is_err());
        let json = r#"{"p": 10, "n": [10], "alpha_sq": [0.5], "rho": 0.5, "bogus": 1}"#;
        assert!(serde_json::from_str::<SimConfig>(json).is_err());
        let json = r#"{"p": 10, "n": [10], "alpha_sq": [0.5], "rho": [[1.0]],
                       "cov_kind": {"kind": "ar1_toeplitz"}}"#;
        let c: SimConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.cov_kind, CovKind::Ar1Toeplitz { t: 0.5 });
        assert_eq!(c.n_test, 2000);
    }

    #[test]
    fn stratified_counts_and_sizes() {
        let mut c = small(2);
        c.class_balance = vec![0.7, 0.5, 0.3];
        let d = simulate(&c).unwrap();
        assert_eq!(d.train[0].class_counts(), (42, 18));
        assert_eq!(d.train[2].class_counts(), (12, 28));
        assert_eq!(d.test.as_ref().unwrap().n(), 100);
        assert_eq!(d.test.as_ref().unwrap().class_counts(), (30, 70));
        c.n_test = 0;
        assert!(simulate(&c).unwrap().test.is_none());
    }

    #[test]
    fn iid_class_counts_within_three_sigma() {
        let c = SimConfig {
            stratified: false,
            n: vec![1000],
            alpha_sq: vec![0.5],
            class_balance: vec![0.3],
            n_test: 0,
            ..small(5)
        };
        let (plus, _) = simulate(&c).unwrap().train[0].class_counts();
        let sd = (1000.0f64 * 0.3 * 0.7).sqrt();
        assert!((plus as f64 - 300.0).abs() < 3.0 * sd);
    }

    #[test]
    fn null_signal_gives_identical_classes() {
        let c = SimConfig {
            alpha_sq: vec![0.0; 3],
            ..small(4)
        };
        let d = simulate(&c).unwrap();
        assert!(d.deltas.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn toeplitz_root_and_shift() {
        let cov = Covariance::build(&CovKind::Ar1Toeplitz { t: 0.5 }, 30).unwrap();
        let r = cov.root.as_ref().unwrap();
        assert!((r * r - &cov.matrix).abs().max() < 1e-10);
        assert!((cov.matrix[(0, 2)] - 0.25).abs() < 1e-12);
        let shifted = cov.with_spectrum_power(3.0);
        let mean = shifted.eigenvalues.iter().sum::<f64>() / 30.0;
        assert!((mean - 1.0).abs() < 1e-12);
        let spread = |c: &Covariance| c.eigenvalues[29] / c.eigenvalues[0];
        assert!(spread(&shifted) > spread(&cov));
    }

    #[test]
    fn sample_covariance_edge_matches_mp() {
        let c = SimConfig {
            p: 50,
            n: vec![500],
            alpha_sq: vec![0.5],
            cov_kind: CovKind::Identity,
            n_test: 0,
            ..small(0)
        };
        let gamma = 50.0 / 498.0;
        let edge = (1.0 + f64::sqrt(gamma)).powi(2);
        for seed in 0..10 {
            let d = simulate(&SimConfig { seed, ..c.clone() }).unwrap();
            let m = compute_moments(&d.train[0]).unwrap();
            let top = m.sigma_hat().symmetric_eigenvalues().max();
            assert!((top - edge).abs() < 0.25, "{top} vs {edge}");
        }
    }
}
