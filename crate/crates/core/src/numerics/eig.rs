//! Symmetric eigendecomposition: Householder tridiagonalization followed by
//! the implicit QL iteration (the EISPACK `tred2`/`tql2` pair).

use serde::Serialize;

use super::{Matrix, NumericsError};
use crate::scalar::Scalar;

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues in `(-EIGEN_CLAMP, 0)` (relative to the spectral radius when it
/// exceeds one) are roundoff and clamp to zero; anything lower is an error.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEigen<S> {
    pub values: Vec<S>,
    /// Eigenvectors as columns.
    pub vectors: Matrix<S>,
}

/// Spectrum of a positive semi-definite matrix: non-negative, descending.
#[derive(Debug, Clone, Serialize)]
pub struct Spectrum<S> {
    pub eigenvalues: Vec<S>,
    pub eigenvectors: Matrix<S>,
}

impl<S: Scalar> SymEigen<S> {
    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<S> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (v, &l) in scaled.row_mut(i).iter_mut().zip(&self.values) {
                *v *= l;
            }
        }
        scaled.matmul_nt(&self.vectors)
    }
}

fn check_symmetric<S: Scalar>(m: &Matrix<S>) -> Result<(), NumericsError> {
    let (r, c) = m.shape();
    if r != c {
        return Err(NumericsError::NotSquare(r, c));
    }
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..r {
        for j in (i + 1)..r {
            let diff = (m[(i, j)].as_f64() - m[(j, i)].as_f64()).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(NumericsError::Asymmetric { row: i, col: j });
            }
        }
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix (eigenvalues may be signed).
pub fn sym_eig<S: Scalar>(m: &Matrix<S>) -> Result<SymEigen<S>, NumericsError> {
    check_symmetric(m)?;
    let n = m.rows();
    if n == 0 {
        return Ok(SymEigen { values: Vec::new(), vectors: Matrix::zeros(0, 0) });
    }
    let mut v = m.clone();
    let mut d = vec![S::zero(); n];
    let mut e = vec![S::zero(); n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).expect("finite eigenvalues"));
    let values = order.iter().map(|&k| d[k]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Eigendecomposition of a positive semi-definite matrix with roundoff
/// negatives clamped to zero.
pub fn psd_spectrum<S: Scalar>(m: &Matrix<S>) -> Result<Spectrum<S>, NumericsError> {
    let eig = sym_eig(m)?;
    let radius = eig.values.iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
    let floor = -EIGEN_CLAMP * radius.max(1.0);
    let mut values = eig.values;
    for (i, v) in values.iter_mut().enumerate() {
        let x = v.as_f64();
        if x < floor {
            return Err(NumericsError::NegativeEigenvalue { index: i, value: x });
        }
        if x < 0.0 {
            *v = S::zero();
        }
    }
    Ok(Spectrum { eigenvalues: values, eigenvectors: eig.vectors })
}

fn tridiagonalize<S: Scalar>(v: &mut Matrix<S>, d: &mut [S], e: &mut [S]) {
    let n = d.len();
    let zero = S::zero();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = zero;
                v[(j, i)] = zero;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = zero;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[(k, j)] -= upd;
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = zero;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = S::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[(k, j)] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = zero;
    }
    v[(n - 1, n - 1)] = S::one();
    e[0] = zero;
}

fn ql_implicit<S: Scalar>(v: &mut Matrix<S>, d: &mut [S], e: &mut [S]) -> Result<(), NumericsError> {
    let n = d.len();
    let zero = S::zero();
    let one = S::one();
    let two = S::of(2.0);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    let eps = S::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 * n.max(1) {
                    return Err(NumericsError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = zero;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn random_symmetric(n: usize, rng: &mut SeededRng) -> Matrix<f64> {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gaussian();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Cyclic Jacobi rotations: slow, simple, and independent of tred2/tql2.
    fn jacobi_eigenvalues(m: &Matrix<f64>) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        vals
    }

    fn rel_recon_error(m: &Matrix<f64>, eig: &SymEigen<f64>) -> f64 {
        let mut diff = eig.reconstruct();
        diff.axpy(-1.0, m);
        diff.frobenius_norm() / m.frobenius_norm().max(1e-300)
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let eig = sym_eig(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_gives_axis_aligned_vectors() {
        let eig = sym_eig(&Matrix::<f64>::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(eig.values, vec![3.0, 1.0]);
        assert!((eig.vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((eig.vectors[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_8x8_matches_jacobi_oracle() {
        let mut rng = SeededRng::new(8);
        let m = random_symmetric(8, &mut rng);
        let eig = sym_eig(&m).unwrap();
        let oracle = jacobi_eigenvalues(&m);
        for (a, b) in eig.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(rel_recon_error(&m, &eig) < 1e-8);
    }

    #[test]
    fn reconstruction_up_to_64() {
        let mut rng = SeededRng::new(64);
        for n in [1, 2, 5, 17, 33, 64] {
            let m = random_symmetric(n, &mut rng);
            let eig = sym_eig(&m).unwrap();
            assert!(rel_recon_error(&m, &eig) < 1e-8, "n={n}");
            let vtv = eig.vectors.matmul_tn(&eig.vectors);
            let mut diff = vtv;
            diff.axpy(-1.0, &Matrix::identity(n));
            assert!(diff.max_abs() < 1e-8, "orthonormality n={n}");
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            sym_eig(&Matrix::<f64>::zeros(2, 3)),
            Err(NumericsError::NotSquare(2, 3))
        ));
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 2.1, 1.0]).unwrap();
        assert!(matches!(sym_eig(&m), Err(NumericsError::Asymmetric { .. })));
    }

    #[test]
    fn psd_clamps_roundoff_and_rejects_indefinite() {
        let v = [1.0f64, 2.0, 3.0];
        let rank1 = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        let spec = psd_spectrum(&rank1).unwrap();
        assert!(spec.eigenvalues.iter().all(|&l| l >= 0.0));
        assert!((spec.eigenvalues[0] - 14.0).abs() < 1e-12);

        let indefinite = Matrix::diag(&[1.0f64, -0.5]);
        assert!(matches!(
            psd_spectrum(&indefinite),
            Err(NumericsError::NegativeEigenvalue { .. })
        ));
    }

    #[test]
    fn single_precision_path_works() {
        let m = Matrix::<f32>::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.5 });
        let eig = sym_eig(&m).unwrap();
        assert!((eig.values[0] - 3.5).abs() < 1e-5);
        assert!((eig.values[3] - 1.5).abs() < 1e-5);
    }
}
