//! Representational geometry: gradient alignment, effective rank, phase
//! coherence, linear CKA and PCA trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ActivationTrace;
use crate::numerics::{pairwise_cosine, pca, psd_spectrum, CovarianceAccumulator, Matrix, NumericsError};
use crate::scalar::Scalar;

/// Positions dropped before effective-rank estimates (attention sink).
pub const ERANK_EXCLUDE: usize = 1;
/// Positions dropped before phase-coherence estimates.
pub const COHERENCE_EXCLUDE: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} rows, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("covariance has rank zero")]
    RankZero,
    #[error("no same-phase pairs for period {period} over {positions} positions")]
    NoSamePhase { period: usize, positions: usize },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ----------------------------------------------------------------------------
// Gradient alignment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Mean cosine over the `N(N−1)` ordered off-diagonal pairs.
    pub value: f64,
    pub samples: usize,
    /// Samples with a zero gradient; their pairs count as 0.
    pub zero_norm: Vec<usize>,
}

pub fn gradient_alignment(vectors: &[Vec<f64>]) -> Result<Alignment, GeometryError> {
    let cos = pairwise_cosine(vectors)?;
    Ok(Alignment { value: cos.mean_off_diagonal(), samples: vectors.len(), zero_norm: cos.zero_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub points: Vec<(usize, f64)>,
    pub samples: usize,
}

// ----------------------------------------------------------------------------
// Effective rank

/// `exp(−Σ pᵢ ln pᵢ)` of the normalized non-negative spectrum.
pub fn erank_from_eigenvalues(eigenvalues: &[f64]) -> Result<f64, GeometryError> {
    let total: f64 = eigenvalues.iter().filter(|&&l| l > 0.0).sum();
    if !(total > 0.0) {
        return Err(GeometryError::RankZero);
    }
    let h: f64 = eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn erank_from_covariance(acc: &CovarianceAccumulator) -> Result<f64, GeometryError> {
    if acc.count() < 2 {
        return Err(GeometryError::TooFew { needed: 2, got: acc.count() });
    }
    let spec = psd_spectrum(&acc.covariance())?;
    erank_from_eigenvalues(&spec.eigenvalues)
}

/// Effective rank of the centered covariance of the rows of `activations`
/// after dropping the first `exclude_first` positions.
pub fn effective_rank<S: Scalar>(activations: &Matrix<S>, exclude_first: usize) -> Result<f64, GeometryError> {
    let mut acc = CovarianceAccumulator::new(activations.cols());
    for i in exclude_first.min(activations.rows())..activations.rows() {
        acc.push(activations.row(i));
    }
    erank_from_covariance(&acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErankReport {
    pub steps: Vec<usize>,
    /// `erank[checkpoint][layer]` over block outputs.
    pub erank: Vec<Vec<f64>>,
}

impl ErankReport {
    pub fn mean(&self) -> Vec<f64> {
        self.erank.iter().map(|l| l.iter().sum::<f64>() / l.len() as f64).collect()
    }

    /// `log₂(final / initial)` per layer.
    pub fn log2_change(&self) -> Vec<f64> {
        match (self.erank.first(), self.erank.last()) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (y / x).log2()).collect(),
            _ => Vec::new(),
        }
    }
}

/// Per-block-output effective rank pooled over all positions of `traces`.
pub fn erank_per_layer<S: Scalar>(
    traces: &[ActivationTrace<S>],
    exclude_first: usize,
) -> Result<Vec<f64>, GeometryError> {
    let first = traces.first().ok_or(GeometryError::TooFew { needed: 1, got: 0 })?;
    let layers = first.hidden.len();
    (1..layers)
        .map(|l| {
            let mut acc = CovarianceAccumulator::new(first.hidden[l].cols());
            for t in traces {
                let h = &t.hidden[l];
                for i in exclude_first.min(h.rows())..h.rows() {
                    acc.push(h.row(i));
                }
            }
            erank_from_covariance(&acc)
        })
        .collect()
}

// ----------------------------------------------------------------------------
// Phase coherence

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceValue {
    pub coherence: f64,
    pub one_minus: f64,
    pub period: usize,
    pub excluded: usize,
}

/// Mean distance between same-phase states over the mean distance between
/// all states.
pub fn phase_coherence<S: Scalar>(
    activations: &Matrix<S>,
    period: usize,
    exclude_first: usize,
) -> Result<CoherenceValue, GeometryError> {
    let n = activations.rows().saturating_sub(exclude_first);
    if period == 0 {
        return Err(GeometryError::NoSamePhase { period, positions: n });
    }
    if n < 2 {
        return Err(GeometryError::TooFew { needed: 2, got: n });
    }
    let rows: Vec<Vec<f64>> = (exclude_first..activations.rows())
        .map(|i| activations.row(i).iter().map(|x| x.as_f64()).collect())
        .collect();
    let (mut same, mut same_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            all += d;
            all_n += 1;
            if (i + exclude_first) % period == (j + exclude_first) % period {
                same += d;
                same_n += 1;
            }
        }
    }
    if same_n == 0 {
        return Err(GeometryError::NoSamePhase { period, positions: n });
    }
    if all == 0.0 {
        return Err(GeometryError::ZeroVariance);
    }
    let coherence = (same / same_n as f64) / (all / all_n as f64);
    Ok(CoherenceValue { coherence, one_minus: 1.0 - coherence, period, excluded: exclude_first })
}

// ----------------------------------------------------------------------------
// CKA

/// Linear CKA `‖XᵀY‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on column-centered inputs.
pub fn linear_cka<S: Scalar>(x: &Matrix<S>, y: &Matrix<S>) -> Result<f64, GeometryError> {
    if x.rows() != y.rows() {
        return Err(GeometryError::Shape(format!("{} vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 3 {
        return Err(GeometryError::TooFew { needed: 3, got: x.rows() });
    }
    let mut xc = x.cast::<f64>();
    let mut yc = y.cast::<f64>();
    xc.center_columns();
    yc.center_columns();
    let xx = xc.matmul_tn(&xc).frobenius_norm();
    let yy = yc.matmul_tn(&yc).frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(GeometryError::ZeroVariance);
    }
    let xy = xc.matmul_tn(&yc).frobenius_norm();
    Ok(xy * xy / (xx * yy))
}

// ----------------------------------------------------------------------------
// PCA trajectories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrajectory {
    pub layer: usize,
    /// Retained positions, in order.
    pub positions: Vec<usize>,
    /// `positions × k` coordinates.
    pub coords: Vec<Vec<f64>>,
    pub variance_fractions: Vec<f64>,
    /// `position mod period` per retained position.
    pub phase: Vec<usize>,
}

/// Top-`k` PCA of every hidden state in `trace`.
pub fn pca_trajectory<S: Scalar>(
    trace: &ActivationTrace<S>,
    k: usize,
    period: usize,
    exclude_first: usize,
) -> Result<Vec<LayerTrajectory>, GeometryError> {
    let period = period.max(1);
    trace
        .hidden
        .iter()
        .enumerate()
        .map(|(layer, h)| {
            let start = exclude_first.min(h.rows());
            let kept = h.slice_rows(start, h.rows());
            let p = pca(&kept, k)?;
            let positions: Vec<usize> = (start..h.rows()).collect();
            Ok(LayerTrajectory {
                layer,
                coords: (0..p.projections.rows()).map(|i| p.projections.row(i).to_vec()).collect(),
                variance_fractions: p.variance_fractions,
                phase: positions.iter().map(|i| i % period).collect(),
                positions,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erank_spectra() {
        assert!((erank_from_eigenvalues(&[1.0; 5]).unwrap() - 5.0).abs() < 1e-12);
        assert!((erank_from_eigenvalues(&[2.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        // p = (0.75, 0.25): H = 0.562335, exp(H) = 1.754765.
        assert!((erank_from_eigenvalues(&[3.0, 1.0]).unwrap() - 1.754765).abs() < 1e-6);
        assert_eq!(erank_from_eigenvalues(&[0.0, 0.0]), Err(GeometryError::RankZero));
    }

    #[test]
    fn alignment_hand_case() {
        // Cosines (1, 0, 0) between pairs (0,1), (0,2), (1,2).
        let g = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        assert!((gradient_alignment(&g).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        let dup = vec![vec![1.0, 2.0, 3.0]; 4];
        assert!((gradient_alignment(&dup).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_states_are_coherent() {
        let m = Matrix::from_fn(40, 3, |i, j| ((i % 4) * 3 + j) as f64);
        let c = phase_coherence(&m, 4, 5).unwrap();
        assert_eq!(c.coherence, 0.0);
        assert_eq!(c.one_minus, 1.0);
        assert!(matches!(phase_coherence(&m, 35, 5), Err(GeometryError::NoSamePhase { .. })));
    }

    #[test]
    fn cka_self() {
        let x = Matrix::from_fn(6, 2, |i, j| ((i * 7 + j * 3) % 5) as f64);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}
