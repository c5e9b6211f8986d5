//! Multitask regression with jointly learned feature and task precision
//! matrices whose spectra are confined to a box `[l, u]`.
//!
//! The objective over `W` (`d x m`), `Sigma1` (`d x d`) and `Sigma2`
//! (`m x m`) is
//!
//! ```text
//! ||Y - XW||_F^2 + eta tr(Sigma1 W Sigma2 W^T) - eta (m log|Sigma1| + d log|Sigma2|)
//! subject to l I <= Sigma1, Sigma2 <= u I
//! ```
//!
//! and is minimised block by block: the weight block by one of three
//! solvers in [`wsolve`], each covariance block in closed form by
//! [`cov::minimize_sigma1`] / [`cov::minimize_sigma2`].

pub mod baselines;
pub mod cov;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod trainer;
pub mod types;
pub mod wsolve;

pub use error::{FetrError, Result};
pub use trainer::{fit_fetr, FetrModel};
pub use types::{
    validate_dataset, CovariancePair, FetrConfig, MultitaskDataset, SpectrumBounds, TrainReport,
    WSolverKind, WeightMatrix,
};
