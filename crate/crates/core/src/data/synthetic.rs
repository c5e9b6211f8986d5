//! Seeded synthetic problems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FetrError, Result};
use crate::types::{MultitaskDataset, SpectrumBounds};

/// Standard deviation of the observation noise added to synthetic targets.
pub const SYNTHETIC_NOISE: f64 = 0.01;

/// Shared-instance dataset with `X ~ U[0,1]^{n x d}` and
/// `Y = X W0 + 0.01 E`, where `W0` and `E` have standard normal entries.
pub fn generate_synthetic(n: usize, d: usize, m: usize, seed: u64) -> Result<MultitaskDataset> {
    if n == 0 || d == 0 || m == 0 {
        return Err(FetrError::EmptyData(format!(
            "synthetic sizes must be positive, got n={n}, d={d}, m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let w0 = DMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &x * w0 + noise * SYNTHETIC_NOISE;
    MultitaskDataset::shared(x, &y)
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Random symmetric matrix with eigenvalues log-uniform in `[l, u]` and a
/// Haar-random eigenbasis.
pub fn random_feasible_covariance<R: Rng>(
    k: usize,
    bounds: &SpectrumBounds,
    rng: &mut R,
) -> DMatrix<f64> {
    let (lo, hi) = (bounds.lower().ln(), bounds.upper().ln());
    let q = random_orthogonal(k, rng);
    let values = DVector::from_fn(k, |_, _| rng.random_range(lo..=hi).exp());
    let s = &q * DMatrix::from_diagonal(&values) * q.transpose();
    crate::linalg::symmetrize(&s)
}
