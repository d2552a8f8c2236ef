use serde::Serialize;

use super::{psd_spectrum, Matrix, NumericsError};
use crate::scalar::Scalar;

/// Streaming mean/covariance in 64-bit (Welford's two accumulators).
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    comoment: Matrix<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, count: 0, mean: vec![0.0; dim], comoment: Matrix::zeros(dim, dim) }
    }

    pub fn push<S: Scalar>(&mut self, x: &[S]) {
        assert_eq!(x.len(), self.dim, "covariance input dimension");
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v.as_f64() - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let after: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v.as_f64() - m).collect();
        for i in 0..self.dim {
            let di = delta[i];
            let row = self.comoment.row_mut(i);
            for (c, a) in row.iter_mut().zip(&after) {
                *c += di * a;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population covariance `(1/N) Σ h hᵀ − h̄ h̄ᵀ`, symmetrized.
    pub fn covariance(&self) -> Matrix<f64> {
        let n = self.count.max(1) as f64;
        Matrix::from_fn(self.dim, self.dim, |i, j| {
            0.5 * (self.comoment[(i, j)] + self.comoment[(j, i)]) / n
        })
    }
}

/// Principal components of a point cloud.
#[derive(Debug, Clone, Serialize)]
pub struct Pca {
    /// `n × k` coordinates on the top-k axes.
    pub projections: Matrix<f64>,
    /// Top-k eigenvalues divided by the total variance.
    pub variance_fractions: Vec<f64>,
    /// `d × k` principal axes as columns.
    pub axes: Matrix<f64>,
    pub mean: Vec<f64>,
}

pub fn pca<S: Scalar>(points: &Matrix<S>, k: usize) -> Result<Pca, NumericsError> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(NumericsError::TooShort { needed: 2, got: n });
    }
    if k > n.min(d) {
        return Err(NumericsError::Shape(format!("k={k} exceeds min(n={n}, d={d})")));
    }
    let mut acc = CovarianceAccumulator::new(d);
    for i in 0..n {
        acc.push(points.row(i));
    }
    let spec = psd_spectrum(&acc.covariance())?;
    let trace: f64 = spec.eigenvalues.iter().sum();
    let variance_fractions = spec
        .eigenvalues
        .iter()
        .take(k)
        .map(|&l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    let axes = spec.eigenvectors.slice_cols(0, k);
    let mean = acc.mean().to_vec();
    let centered = Matrix::from_fn(n, d, |i, j| points[(i, j)].as_f64() - mean[j]);
    Ok(Pca { projections: centered.matmul(&axes), variance_fractions, axes, mean })
}

/// Pairwise cosine similarities; zero vectors get 0 off the diagonal.
#[derive(Debug, Clone)]
pub struct CosineMatrix {
    pub matrix: Matrix<f64>,
    /// Indices of zero-norm inputs.
    pub zero_norm: Vec<usize>,
}

impl CosineMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.matrix.rows();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += self.matrix[(i, j)];
                }
            }
        }
        total / (n * (n - 1)) as f64
    }
}

pub fn pairwise_cosine<S: Scalar>(vectors: &[Vec<S>]) -> Result<CosineMatrix, NumericsError> {
    let n = vectors.len();
    if n < 2 {
        return Err(NumericsError::TooShort { needed: 2, got: n });
    }
    let len = vectors[0].len();
    if vectors.iter().any(|v| v.len() != len) {
        return Err(NumericsError::Shape("vectors differ in length".into()));
    }
    let norms: Vec<f64> =
        vectors.iter().map(|v| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()).collect();
    let zero_norm: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    let mut matrix = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let d: f64 =
                    vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                (d / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            matrix[(i, j)] = c;
            matrix[(j, i)] = c;
        }
    }
    Ok(CosineMatrix { matrix, zero_norm })
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores `x` in place with `std` floored at `floor`; returns whether the
/// floor was hit.
pub fn zscore_in_place(x: &mut [f64], floor: f64) -> bool {
    let (mean, std) = mean_std(x);
    let degenerate = std < floor;
    let s = std.max(floor);
    for v in x.iter_mut() {
        *v = (*v - mean) / s;
    }
    degenerate
}
