use proptest::prelude::*;
use tslab::datagen::SeriesBank;
use tslab::numerics::{Matrix, SeededRng};
use tslab::probe::{
    em_train, mean_psd_cosine, objective, probe_forward, retrieval_forecast, retrieval_summary, ProbeConfig,
    ProbeParams,
};
use tslab::tokenizer::STD_FLOOR;

const T: usize = 16;

fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - m) / s).collect()
}

/// Z-scored sines and squares of assorted periods and phases.
fn wave_bank(n: usize, t: usize, seed: u64) -> SeriesBank {
    let mut rng = SeededRng::new(seed);
    let windows = (0..n)
        .map(|i| {
            let p = 3.0 + rng.uniform() * 9.0;
            let phase = rng.uniform() * std::f64::consts::TAU;
            let x: Vec<f64> = (0..t)
                .map(|k| {
                    let s = (std::f64::consts::TAU * k as f64 / p + phase).sin();
                    if i % 2 == 0 { s } else { s.signum() + 0.1 * s }
                })
                .collect();
            zscore(&x)
        })
        .collect();
    SeriesBank::from_windows(windows)
}

/// Bank closed under negation, since the z-scored probe cannot fix its sign.
fn symmetric_bank(n: usize, t: usize, seed: u64) -> SeriesBank {
    let base = wave_bank(n / 2, t, seed).windows;
    let neg: Vec<Vec<f64>> = base.iter().map(|w| w.iter().map(|v| -v).collect()).collect();
    SeriesBank::from_windows(base.into_iter().chain(neg).collect())
}

/// Column 0 holds a bank window; the rest is noise, so `w = ±e₀` is exact.
fn planted_features(bank: &SeriesBank, n: usize, d: usize, seed: u64) -> Vec<Matrix<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let w = &bank.windows[i % bank.len()];
            Matrix::from_fn(bank.window_len(), d, |t, j| if j == 0 { w[t] } else { rng.gaussian() })
        })
        .collect()
}

fn noise_features(n: usize, d: usize, seed: u64) -> Vec<Matrix<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            // Smoothed noise so outputs carry varied spectra.
            let raw = Matrix::from_fn(T + 2, d, |_, _| rng.gaussian());
            Matrix::from_fn(T, d, |t, j| raw[(t, j)] + raw[(t + 1, j)] + 0.5 * raw[(t + 2, j)])
        })
        .collect()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let bank = wave_bank(8, T, 1);
    let feats = noise_features(5, 4, 2);
    let targets: Vec<&[f64]> = (0..5).map(|i| bank.windows[i].as_slice()).collect();
    let mut rng = SeededRng::new(3);
    let params = ProbeParams::random(4, 1.0, &mut rng);
    for lambda in [0.0, 0.5] {
        let (_, g) = objective(&params, &feats, &targets, lambda, STD_FLOOR).unwrap();
        let h = 1e-6;
        for k in 0..=4 {
            let shift = |d: f64| {
                let mut p = params.clone();
                if k < 4 {
                    p.w[k] += d;
                } else {
                    p.b += d;
                }
                objective(&p, &feats, &targets, lambda, STD_FLOOR).unwrap().0.total
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let an = if k < 4 { g.w[k] } else { g.b };
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "λ={lambda} k={k}: {fd} vs {an}");
        }
        // z-scoring removes the bias from the output entirely.
        assert!(g.b.abs() < 1e-10);
    }
}

#[test]
fn planted_solution_is_found() {
    let bank = symmetric_bank(32, T, 11);
    let feats = planted_features(&bank, 64, 4, 12);
    let cfg = ProbeConfig { lambda: 0.0, candidates: 32, batch_size: 16, epochs: 100, lr: 0.05, ..ProbeConfig::default() };
    let fit = em_train(&feats, &bank, &cfg, None).unwrap();
    let first = fit.history[0].loss;
    let last = fit.history.last().unwrap().loss;
    assert!(last < 1e-3 * first, "{first} -> {last}");
    let w = &fit.params.w;
    assert!(w[1..].iter().all(|x| x.abs() < 0.05 * w[0].abs()), "{w:?}");
}

#[test]
fn penalty_diversifies_spectra() {
    let bank = wave_bank(64, T, 21);
    for seed in 1..=5u64 {
        let feats = noise_features(64, 8, 100 + seed);
        let run = |lambda: f64| {
            let cfg = ProbeConfig { lambda, candidates: 32, batch_size: 16, epochs: 40, lr: 0.02, seed, ..ProbeConfig::default() };
            let fit = em_train(&feats, &bank, &cfg, None).unwrap();
            let outs: Vec<Vec<f64>> =
                probe_forward(&fit.params, &feats, STD_FLOOR).unwrap().into_iter().map(|o| o.values).collect();
            mean_psd_cosine(&outs).unwrap()
        };
        let (off, on) = (run(0.0), run(0.5));
        assert!(on < off, "seed {seed}: {on} vs {off}");
    }
}

/// Random walks; every other query continues a bank entry.
fn retrieval_setup(queries: usize, bank_n: usize, t: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let bank = wave_bank(bank_n, t, seed).windows;
    let mut rng = SeededRng::new(seed + 1);
    let qs = (0..queries)
        .map(|i| {
            if i % 2 == 0 {
                bank[rng.below(bank_n)].iter().map(|v| v + 0.05 * rng.gaussian()).collect()
            } else {
                let mut x = 0.0;
                zscore(&(0..t).map(|_| {
                    x += rng.gaussian();
                    x
                }).collect::<Vec<_>>())
            }
        })
        .collect();
    (qs, bank)
}

#[test]
fn retrieval_beats_last_value_on_planted_bank() {
    let (qs, bank) = retrieval_setup(500, 200, 32, 31);
    let results: Vec<_> = qs.iter().map(|q| retrieval_forecast(q, &bank, 24).unwrap()).collect();
    let s = retrieval_summary(&results).unwrap();
    assert_eq!(s.queries, 500);
    assert!(s.retrieval_mse < s.last_value_mse, "{s:?}");
    assert!(s.win_rate > 0.4);
}

proptest! {
    #[test]
    fn retrieval_ignores_hidden_half(seed in 0u64..1000, split in 4usize..28, noise in prop::collection::vec(-5.0f64..5.0, 32)) {
        let (qs, bank) = retrieval_setup(2, 50, 32, seed);
        let q = &qs[seed as usize % 2];
        let mut moved = q.clone();
        for (v, n) in moved[split..].iter_mut().zip(&noise) {
            *v += n;
        }
        let a = retrieval_forecast(q, &bank, split).unwrap();
        let b = retrieval_forecast(&moved, &bank, split).unwrap();
        prop_assert_eq!(a.index, b.index);
        prop_assert_eq!(a.forecast, b.forecast);
        prop_assert_eq!(a.baseline, b.baseline);
    }
}
