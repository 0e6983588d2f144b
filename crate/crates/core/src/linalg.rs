//! Dense f64 kernels for large p: Gram products and symmetric eigendecompositions.

use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

pub(crate) fn to_dmatrix(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `scale * X^T X`, symmetrized.
pub fn gram(x: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let xv = view(x);
    let g = xv.transpose() * xv;
    let p = x.ncols();
    DMatrix::from_fn(p, p, |i, j| 0.5 * scale * (g[(i, j)] + g[(j, i)]))
}

/// Eigenvalues (non-decreasing) and orthonormal eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("matrix has non-finite entries".into()));
    }
    let evd = view(m)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::numerical(format!("eigendecomposition failed: {e:?}"), f64::NAN))?;
    let s = evd.S().column_vector();
    let values = (0..m.nrows()).map(|i| s[i]).collect();
    Ok((values, evd.U().to_owned()))
}

/// Eigenvalues only, non-decreasing.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("matrix has non-finite entries".into()));
    }
    view(m)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::numerical(format!("eigenvalue solve failed: {e:?}"), f64::NAN))
}

/// `Q^T x` for a faer eigenvector matrix.
pub(crate) fn project(q: &Mat<f64>, x: &DVector<f64>) -> DVector<f64> {
    let xv = MatRef::from_column_major_slice(x.as_slice(), x.len(), 1);
    let y = q.transpose() * xv;
    DVector::from_fn(x.len(), |i, _| y[(i, 0)])
}

/// `Q c` for a faer eigenvector matrix.
pub(crate) fn expand(q: &Mat<f64>, c: &[f64]) -> DVector<f64> {
    let cv = MatRef::from_column_major_slice(c, c.len(), 1);
    let y = q * cv;
    DVector::from_fn(c.len(), |i, _| y[(i, 0)])
}
