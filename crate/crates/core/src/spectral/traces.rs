//! Finite-p resolvent traces backed by one eigendecomposition per matrix.
//!
//! With `S_a = Q_a L_a Q_a^T`, any trace `tr(f(S_a) g(S_b) W)/p` is
//! `f^T P g / p` where `P = (Q_a^T Q_b) o (Q_a^T W Q_b)`. The kernel `P` is built
//! once per pair, so every point of a regularization grid costs `O(p^2)`.

use faer::Mat;
use nalgebra::{DMatrix, DVector};

use super::{stieltjes_from_eigs, CrossTraceKind, EigenSpectrum, SpectralSummary};
use crate::error::{Error, Result};
use crate::linalg;

/// Eigendecomposition of a symmetric PSD matrix plus its aspect ratio.
#[derive(Debug, Clone)]
pub struct EigenCache {
    values: Vec<f64>,
    vectors: Mat<f64>,
    gamma: f64,
}

impl EigenCache {
    pub fn from_symmetric(m: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Contract("expected a nonempty square matrix".into()));
        }
        let (mut values, vectors) = linalg::symmetric_eigen(m)?;
        let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let floor = -1e-10 * scale.max(1.0);
        if values[0] < floor {
            return Err(Error::numerical("matrix is not PSD", values[0]));
        }
        for v in &mut values {
            *v = v.max(0.0);
        }
        Ok(Self {
            values,
            vectors,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Eigenvalues in non-decreasing order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spectrum(&self) -> EigenSpectrum<f64> {
        EigenSpectrum::new(self.values.clone(), self.gamma).expect("validated eigenvalues")
    }

    pub fn summary(&self, lambda: f64) -> Result<SpectralSummary<f64>> {
        stieltjes_from_eigs(&self.spectrum(), lambda)
    }

    pub fn resolvent_weights(&self, lambda: f64) -> Vec<f64> {
        self.values.iter().map(|l| 1.0 / (l + lambda)).collect()
    }

    /// `Q^T x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        linalg::project(&self.vectors, x)
    }

    /// `Q c`.
    pub fn expand(&self, c: &[f64]) -> DVector<f64> {
        linalg::expand(&self.vectors, c)
    }

    /// `(S + lambda I)^-1 x`.
    pub fn apply_resolvent(&self, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        let y = self.project(x);
        let c: Vec<f64> = y.iter().zip(&self.values).map(|(y, l)| y / (l + lambda)).collect();
        self.expand(&c)
    }

    pub fn resolvent(&self, lambda: f64) -> DMatrix<f64> {
        let q = linalg::to_dmatrix(self.vectors.as_ref());
        let d = DVector::from_vec(self.resolvent_weights(lambda));
        &q * DMatrix::from_diagonal(&d) * q.transpose()
    }

    /// Reconstructs the matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let q = linalg::to_dmatrix(self.vectors.as_ref());
        let d = DVector::from_column_slice(&self.values);
        &q * DMatrix::from_diagonal(&d) * q.transpose()
    }

    fn vectors(&self) -> &Mat<f64> {
        &self.vectors
    }
}

/// Pairwise kernel for traces of spectral functions of two matrices.
#[derive(Debug, Clone)]
pub struct CrossKernel {
    weights: Mat<f64>,
}

impl CrossKernel {
    /// Kernel for `tr(f(S_a) g(S_b) W)/p`, `W = I` when `weight` is `None`.
    pub fn new(a: &EigenCache, b: &EigenCache, weight: Option<&DMatrix<f64>>) -> Result<Self> {
        let p = a.dim();
        if b.dim() != p || weight.is_some_and(|w| w.nrows() != p || w.ncols() != p) {
            return Err(Error::Contract("dimension mismatch in cross kernel".into()));
        }
        let (qa, qb) = (a.vectors(), b.vectors());
        let ab = qa.transpose() * qb;
        let weights = match weight {
            None => Mat::from_fn(p, p, |i, j| ab[(i, j)] * ab[(i, j)]),
            Some(w) => {
                let wq = linalg::view(w) * qb;
                let awb = qa.transpose() * wq;
                Mat::from_fn(p, p, |i, j| ab[(i, j)] * awb[(i, j)])
            }
        };
        Ok(Self { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    /// `f^T P g / p`.
    pub fn eval(&self, f: &[f64], g: &[f64]) -> f64 {
        let p = self.dim();
        let mut total = 0.0;
        for j in 0..p {
            let col = self.weights.col(j);
            let mut s = 0.0;
            for i in 0..p {
                s += f[i] * col[i];
            }
            total += s * g[j];
        }
        total / p as f64
    }

    /// `tr(R_a R_b W)/p` at the given regularizers.
    pub fn resolvent_trace(&self, a: &EigenCache, la: f64, b: &EigenCache, lb: f64) -> f64 {
        self.eval(&a.resolvent_weights(la), &b.resolvent_weights(lb))
    }
}

/// Exact `(1/p) tr(R_a R_b W)` from explicit resolvent matrices.
pub fn cross_trace(
    kind: CrossTraceKind,
    r_a: &DMatrix<f64>,
    r_b: &DMatrix<f64>,
    weight: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let p = r_a.nrows();
    let square = |m: &DMatrix<f64>| m.nrows() == p && m.ncols() == p;
    if !square(r_a) || !square(r_b) || weight.is_some_and(|w| !square(w)) {
        return Err(Error::Contract("dimension mismatch in cross trace".into()));
    }
    if kind.weighted() != weight.is_some() {
        return Err(Error::Contract(format!(
            "cross trace {kind:?} {} a weight matrix",
            if kind.weighted() { "needs" } else { "takes no" }
        )));
    }
    let rb_w = match weight {
        Some(w) => r_b * w,
        None => r_b.clone(),
    };
    // tr(A B) = sum_ij A_ij B_ji
    Ok(r_a.component_mul(&rb_w.transpose()).sum() / p as f64)
}

/// `(1 - gamma_K) tr(S_K^-1 R_k)/p` using a kernel between the target and a
/// source cache with identity weight.
pub fn est_trace_sigma_k_inv_resolvent(
    target: &EigenCache,
    source: &EigenCache,
    kernel: &CrossKernel,
    lambda_source: f64,
) -> Result<f64> {
    let gamma_k = target.gamma();
    if gamma_k >= 1.0 {
        return Err(Error::UnsupportedRegime(format!(
            "target covariance is singular at gamma {gamma_k}; use the pooled covariance"
        )));
    }
    let min = target.values()[0];
    if min <= 1e-12 * target.values().last().copied().unwrap_or(1.0) {
        return Err(Error::numerical(
            "target covariance is singular; use the pooled covariance",
            min,
        ));
    }
    let inv: Vec<f64> = target.values().iter().map(|l| 1.0 / l).collect();
    Ok((1.0 - gamma_k) * kernel.eval(&inv, &source.resolvent_weights(lambda_source)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd(p: usize, seed: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p + 2, |i, j| (((i + 1) * (j + 3) * (seed + 7)) % 11) as f64 / 11.0 - 0.4);
        &a * a.transpose() / p as f64
    }

    #[test]
    fn scalar_resolvents() {
        let half = DMatrix::<f64>::identity(6, 6) * 0.5;
        assert_relative_eq!(cross_trace(CrossTraceKind::E, &half, &half, None).unwrap(), 0.25);
        assert!(cross_trace(CrossTraceKind::M, &half, &half, None).is_err());
        let w = DMatrix::<f64>::identity(5, 5);
        assert!(cross_trace(CrossTraceKind::M, &half, &half, Some(&w)).is_err());
    }

    #[test]
    fn kernel_matches_direct_trace() {
        let sa = spd(8, 1);
        let sb = spd(8, 2);
        let w = spd(8, 3);
        let a = EigenCache::from_symmetric(&sa, 0.5).unwrap();
        let b = EigenCache::from_symmetric(&sb, 0.5).unwrap();
        let (la, lb) = (0.7, 1.9);
        let (ra, rb) = (a.resolvent(la), b.resolvent(lb));
        let direct_ra = (&sa + DMatrix::identity(8, 8) * la).try_inverse().unwrap();
        assert!((&ra - direct_ra).abs().max() < 1e-10);
        let k = CrossKernel::new(&a, &b, None).unwrap();
        assert_relative_eq!(
            k.resolvent_trace(&a, la, &b, lb),
            cross_trace(CrossTraceKind::E, &ra, &rb, None).unwrap(),
            epsilon = 1e-12
        );
        let kw = CrossKernel::new(&a, &b, Some(&w)).unwrap();
        assert_relative_eq!(
            kw.resolvent_trace(&a, la, &b, lb),
            cross_trace(CrossTraceKind::M, &ra, &rb, Some(&w)).unwrap(),
            epsilon = 1e-12
        );
        // Same matrix on both sides reduces to m'.
        let kaa = CrossKernel::new(&a, &a, None).unwrap();
        let s = a.summary(la).unwrap();
        assert_relative_eq!(kaa.resolvent_trace(&a, la, &a, la), s.m_prime, epsilon = 1e-12);
    }

    #[test]
    fn apply_resolvent_solves_system() {
        let s = spd(6, 4);
        let c = EigenCache::from_symmetric(&s, 1.0).unwrap();
        let x = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let y = c.apply_resolvent(0.3, &x);
        let back = (&s + DMatrix::identity(6, 6) * 0.3) * y;
        assert!((back - x).norm() < 1e-10);
    }

    #[test]
    fn inverse_trace_with_degenerate_source() {
        // Source sample covariance is zero, so R_k = I/lambda.
        let target = spd(5, 5) + DMatrix::identity(5, 5);
        let t = EigenCache::from_symmetric(&target, 0.5).unwrap();
        let src = EigenCache::from_symmetric(&DMatrix::zeros(5, 5), 0.5).unwrap();
        let k = CrossKernel::new(&t, &src, None).unwrap();
        let lambda = 2.0;
        let got = est_trace_sigma_k_inv_resolvent(&t, &src, &k, lambda).unwrap();
        let tr_inv = target.clone().try_inverse().unwrap().trace();
        assert_relative_eq!(got, 0.5 * tr_inv / (5.0 * lambda), epsilon = 1e-12);
        let singular = EigenCache::from_symmetric(&target, 1.2).unwrap();
        assert!(est_trace_sigma_k_inv_resolvent(&singular, &src, &k, lambda).is_err());
    }
}
