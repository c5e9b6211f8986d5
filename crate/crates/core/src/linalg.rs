//! Dense kernels: symmetric eigendecomposition, eigenvalue clamping and a
//! Sylvester solve for symmetric coefficient matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FetrError, Result};
use crate::types::{EigenDecomp, SpectrumBounds};

/// Eigenvalues this close to a bound are snapped onto it.
pub const CLAMP_SNAP_TOL: f64 = 1e-12;

pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Eigendecomposition of `(S + S^T) / 2` with eigenvalues in ascending order.
pub fn sym_eig(s: &DMatrix<f64>) -> Result<EigenDecomp> {
    if !s.is_square() {
        return Err(FetrError::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(FetrError::Numeric("eigendecomposition input".into()));
    }
    let k = s.nrows();
    if k == 0 {
        return Ok(EigenDecomp {
            vectors: DMatrix::zeros(0, 0),
            values: DVector::zeros(0),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    if !values.iter().all(|v| v.is_finite()) {
        return Err(FetrError::Numeric("eigenvalues".into()));
    }
    Ok(EigenDecomp { vectors, values })
}

/// `max(l, min(u, x))`; `+inf` maps to `u`.
pub fn hard_threshold(x: f64, l: f64, u: f64) -> f64 {
    l.max(u.min(x))
}

/// Clamp with snapping of near-bound values.
pub(crate) fn clamp_snapped(x: f64, bounds: &SpectrumBounds) -> f64 {
    let (l, u) = (bounds.lower(), bounds.upper());
    if (x - l).abs() <= CLAMP_SNAP_TOL * l.max(1.0) {
        l
    } else if (x - u).abs() <= CLAMP_SNAP_TOL * u.max(1.0) {
        u
    } else {
        hard_threshold(x, l, u)
    }
}

/// Frobenius-nearest point of `{ l I <= S <= u I }`.
pub fn project_bounded_spd(s: &DMatrix<f64>, bounds: &SpectrumBounds) -> Result<DMatrix<f64>> {
    let eig = sym_eig(s)?;
    Ok(eig.map_spectrum(|v| clamp_snapped(v, bounds)))
}

/// Solves `A W + W B = C` for symmetric `A` (PSD) and `B` (PD).
///
/// Both coefficients are diagonalised, so in the eigenbases the system is
/// elementwise: `W''_ij = C''_ij / (alpha_i + beta_j)`.
pub fn sylvester_solve_spd(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !a.is_square() || !b.is_square() || c.nrows() != a.nrows() || c.ncols() != b.nrows() {
        return Err(FetrError::Dimension(format!(
            "Sylvester system with A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let ea = sym_eig(a)?;
    let eb = sym_eig(b)?;
    let scale = ea.values.amax().max(eb.values.amax()).max(f64::MIN_POSITIVE);
    let mut rotated = ea.vectors.transpose() * c * &eb.vectors;
    for j in 0..rotated.ncols() {
        for i in 0..rotated.nrows() {
            let denom = ea.values[i] + eb.values[j];
            if denom.abs() <= f64::EPSILON * scale {
                return Err(FetrError::Singular(format!(
                    "spectra of A and -B overlap (alpha + beta = {denom:e})"
                )));
            }
            rotated[(i, j)] /= denom;
        }
    }
    Ok(&ea.vectors * rotated * eb.vectors.transpose())
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn log_det_spd(s: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eig(s)?;
    if !eig.values.is_empty() && eig.min() <= 0.0 {
        return Err(FetrError::Domain(format!(
            "log-determinant of a matrix with eigenvalue {}",
            eig.min()
        )));
    }
    Ok(eig.values.iter().map(|v| v.ln()).sum())
}

/// Inverse of a symmetric positive definite matrix via its eigenbasis.
pub fn inverse_spd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig(s)?;
    let tol = f64::EPSILON * eig.max().abs().max(1.0) * s.nrows() as f64;
    if !eig.values.is_empty() && eig.min() <= tol {
        return Err(FetrError::Singular(format!(
            "matrix with eigenvalue {} is not invertible",
            eig.min()
        )));
    }
    Ok(eig.map_spectrum(f64::recip))
}

/// Kronecker product `A (x) B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorisation.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}
