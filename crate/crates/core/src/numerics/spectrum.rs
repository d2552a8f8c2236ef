//! One-sided power spectra with the unnormalized forward DFT
//! `X_k = Σ_t x_t e^{-2πikt/T}`.
//!
//! Interior bins are doubled so that `Σ_k P_k = Σ_k |X_k|² = T · Σ_t x_t²`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::NumericsError;
use crate::scalar::Scalar;

fn fold_weight(k: usize, t: usize) -> f64 {
    if k == 0 || 2 * k == t {
        1.0
    } else {
        2.0
    }
}

fn forward_dft<S: Scalar>(x: &[S]) -> Vec<Complex<S>> {
    let mut buf: Vec<Complex<S>> = x.iter().map(|&v| Complex::new(v, S::zero())).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

/// One-sided power spectrum, `T/2 + 1` bins.
pub fn power_spectrum<S: Scalar>(x: &[S]) -> Result<Vec<S>, NumericsError> {
    let t = x.len();
    if t < 2 {
        return Err(NumericsError::TooShort { needed: 2, got: t });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let spec = forward_dft(x);
    Ok((0..=t / 2).map(|k| S::of(fold_weight(k, t)) * spec[k].norm_sqr()).collect())
}

/// Vector-Jacobian product of [`power_spectrum`]: maps `∂L/∂P` to `∂L/∂x`.
pub fn power_spectrum_vjp<S: Scalar>(x: &[S], grad_psd: &[S]) -> Vec<S> {
    let t = x.len();
    assert_eq!(grad_psd.len(), t / 2 + 1, "gradient length");
    let spec = forward_dft(x);
    // ∂P_k/∂x_t = 2 c_k Re(conj(X_k) e^{-2πikt/T}); summing over k is one more
    // forward DFT of a_k = g_k c_k conj(X_k).
    let mut a = vec![Complex::new(S::zero(), S::zero()); t];
    for k in 0..=t / 2 {
        a[k] = spec[k].conj() * (grad_psd[k] * S::of(fold_weight(k, t)));
    }
    FftPlanner::new().plan_fft_forward(t).process(&mut a);
    a.iter().map(|c| S::of(2.0) * c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn naive_power(x: &[f64]) -> Vec<f64> {
        let t = x.len();
        (0..=t / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let ang = -std::f64::consts::TAU * (k * n) as f64 / t as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                fold_weight(k, t) * (re * re + im * im)
            })
            .collect()
    }

    #[test]
    fn constant_sequence_is_all_dc() {
        let p = power_spectrum(&[2.0f64; 16]).unwrap();
        assert!((p[0] - 1024.0).abs() < 1e-9);
        assert!(p[1..].iter().all(|&v| v.abs() < 1e-18));
    }

    #[test]
    fn sine_period_64_peaks_at_bin_8() {
        let x: Vec<f64> =
            (0..512).map(|t| (std::f64::consts::TAU * t as f64 / 64.0).sin()).collect();
        let p = power_spectrum(&x).unwrap();
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 8);
        // |X_8| = T/2 for a unit sine, doubled as an interior bin.
        assert!((p[8] - 2.0 * 256.0f64 * 256.0).abs() < 1e-6);
    }

    #[test]
    fn white_noise_matches_direct_dft_and_parseval() {
        let mut rng = SeededRng::new(11);
        for t in [2usize, 3, 17, 64, 100] {
            let x: Vec<f64> = (0..t).map(|_| rng.gaussian()).collect();
            let fast = power_spectrum(&x).unwrap();
            let slow = naive_power(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            let energy: f64 = x.iter().map(|v| v * v).sum::<f64>() * t as f64;
            let total: f64 = fast.iter().sum();
            assert!((total - energy).abs() <= 1e-8 * energy);
        }
    }

    #[test]
    fn parseval_over_many_sequences() {
        let mut rng = SeededRng::new(1000);
        for i in 0..1000 {
            let t = 2 + (i % 130);
            let x: Vec<f64> = (0..t).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            let total: f64 = power_spectrum(&x).unwrap().iter().sum();
            let energy: f64 = x.iter().map(|v| v * v).sum::<f64>() * t as f64;
            assert!((total - energy).abs() <= 1e-8 * energy, "t={t}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        for t in [8usize, 9] {
            let x: Vec<f64> = (0..t).map(|_| rng.gaussian()).collect();
            let g: Vec<f64> = (0..=t / 2).map(|_| rng.gaussian()).collect();
            let analytic = power_spectrum_vjp(&x, &g);
            for i in 0..t {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let f = |v: &[f64]| -> f64 {
                    power_spectrum(v).unwrap().iter().zip(&g).map(|(p, g)| p * g).sum()
                };
                let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((numeric - analytic[i]).abs() < 1e-6 * numeric.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(power_spectrum(&[1.0f64]).is_err());
        assert!(power_spectrum(&[1.0f64, f64::NAN]).is_err());
    }
}
