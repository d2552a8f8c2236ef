//! Dense linear algebra, spectra, and the seeded generator every other module
//! draws from.

mod eig;
mod matrix;
mod rng;
mod spectrum;
mod stats;

use thiserror::Error;

pub use eig::{psd_spectrum, sym_eig, Spectrum, SymEigen, EIGEN_CLAMP, SYMMETRY_TOL};
pub use matrix::{dot, norm, Matrix};
pub use rng::SeededRng;
pub use spectrum::{power_spectrum, power_spectrum_vjp};
pub use stats::{
    mean_std, pairwise_cosine, pca, zscore_in_place, CosineMatrix, CovarianceAccumulator, Pca,
};

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is {0}x{1}, expected square")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("eigenvalue {index} is {value:e}, below the clamp threshold")]
    NegativeEigenvalue { index: usize, value: f64 },
    #[error("QL iteration did not converge")]
    NoConvergence,
    #[error("non-finite input")]
    NonFinite,
    #[error("need at least {needed} items, got {got}")]
    TooShort { needed: usize, got: usize },
}
