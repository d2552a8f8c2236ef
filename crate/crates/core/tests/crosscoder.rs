use proptest::prelude::*;
use tslab::crosscoder::{self, rank_cross_domain, CrosscoderConfig, CrosscoderParams, Domain, FeatureLabel, Normalizer};
use tslab::numerics::{Matrix, SeededRng};

fn unit_atoms(d: usize, atoms: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < atoms {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        if atoms <= d {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
}

/// Rows that are `k`-sparse positive combinations of `atoms`, atom `i` drawn
/// with weight `(i+1)^-skew`.
fn sparse_rows(atoms: &[Vec<f64>], n: usize, k: usize, skew: f64, seed: u64) -> Matrix<f64> {
    let d = atoms[0].len();
    let w: Vec<f64> = (0..atoms.len()).map(|i| ((i + 1) as f64).powf(-skew)).collect();
    let total: f64 = w.iter().sum();
    let mut rng = SeededRng::new(seed);
    let mut m = Matrix::zeros(n, d);
    for r in 0..n {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < k {
            let mut u = rng.uniform() * total;
            let mut j = 0;
            while j + 1 < atoms.len() && u > w[j] {
                u -= w[j];
                j += 1;
            }
            if !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        for j in chosen {
            let c = rng.uniform_range(0.5, 1.5);
            for (x, a) in m.row_mut(r).iter_mut().zip(&atoms[j]) {
                *x += c * a;
            }
        }
    }
    m
}

fn quick(d: usize, features: usize, k: usize, seed: u64) -> CrosscoderConfig {
    CrosscoderConfig {
        d,
        features,
        k,
        aux_k: features.min(16),
        lr: 3e-3,
        warmup_steps: 50,
        total_steps: 1500,
        patience: None,
        aux_start_step: 200,
        dead_window: 200,
        seed,
        ..CrosscoderConfig::default()
    }
}

#[test]
fn planted_dictionary_recovery() {
    let atoms = unit_atoms(32, 32, 7);
    let a = sparse_rows(&atoms, 4000, 4, 0.0, 1);
    let b = sparse_rows(&atoms, 4000, 4, 0.0, 2);
    let fit = crosscoder::train(&quick(32, 64, 4, 420), &a, &b).unwrap();
    assert!(fit.final_mse < 0.1 * fit.initial_mse, "{} vs {}", fit.final_mse, fit.initial_mse);
}

#[test]
fn auxk_reduces_dead_features() {
    let atoms = unit_atoms(32, 128, 7);
    for seed in 1..=3u64 {
        let a = sparse_rows(&atoms, 4000, 4, 1.0, 10 + seed);
        let b = sparse_rows(&atoms, 4000, 4, 1.0, 20 + seed);
        let base = CrosscoderConfig { aux_k: 32, total_steps: 2000, ..quick(32, 128, 4, seed) };
        let off = crosscoder::train(&CrosscoderConfig { aux_weight: 0.0, ..base.clone() }, &a, &b).unwrap();
        let on = crosscoder::train(&base, &a, &b).unwrap();
        assert!(
            on.final_dead_fraction() < off.final_dead_fraction(),
            "seed {seed}: {} vs {}",
            on.final_dead_fraction(),
            off.final_dead_fraction()
        );
    }
}

#[test]
fn training_is_deterministic() {
    let atoms = unit_atoms(8, 8, 3);
    let a = sparse_rows(&atoms, 300, 2, 0.0, 1);
    let b = sparse_rows(&atoms, 300, 2, 0.0, 2);
    let cfg = CrosscoderConfig { total_steps: 120, aux_start_step: 20, dead_window: 20, ..quick(8, 16, 2, 9) };
    let x = crosscoder::train(&cfg, &a, &b).unwrap();
    let y = crosscoder::train(&cfg, &a, &b).unwrap();
    assert_eq!(x, y);
}

#[test]
fn aux_term_vanishes_without_dead_features() {
    // With K = F every feature with a positive pre-activation fires.
    let atoms = unit_atoms(8, 8, 3);
    let a = sparse_rows(&atoms, 500, 3, 0.0, 1);
    let b = sparse_rows(&atoms, 500, 3, 0.0, 2);
    let cfg = CrosscoderConfig {
        aux_k: 4,
        total_steps: 200,
        aux_start_step: 20,
        dead_window: 20,
        log_every: 1,
        ..quick(8, 4, 4, 5)
    };
    let fit = crosscoder::train(&cfg, &a, &b).unwrap();
    for r in &fit.history {
        if r.dead_fraction == 0.0 {
            assert_eq!(r.aux, 0.0, "step {}", r.step);
        }
    }
    assert!(fit.history.iter().any(|r| r.step >= 20 && r.dead_fraction == 0.0));
}

#[test]
fn dense_codes_match_low_rank_ceiling() {
    // Rank-4 data: the PCA-4 reconstruction error is zero, so a dense code
    // should get within 5% of the normalized variance.
    let atoms = unit_atoms(8, 4, 11);
    let a = sparse_rows(&atoms, 2000, 4, 0.0, 1);
    let b = sparse_rows(&atoms, 2000, 4, 0.0, 2);
    let fit = crosscoder::train(&CrosscoderConfig { aux_weight: 0.0, total_steps: 2000, ..quick(8, 16, 16, 3) }, &a, &b).unwrap();
    assert!(fit.final_mse < 0.05 * 2.0, "{}", fit.final_mse);
}

#[test]
fn planted_shared_feature_ranks_first() {
    let d = 16;
    let atoms = unit_atoms(d, 13, 21);
    let (shared, rest) = atoms.split_last().unwrap();
    let (only_a, only_b) = rest.split_at(6);
    let build = |own: &[Vec<f64>], seed: u64| {
        let mut m = sparse_rows(own, 3000, 2, 0.0, seed);
        let mut rng = SeededRng::new(seed + 100);
        let mut has = vec![false; m.rows()];
        for r in 0..m.rows() {
            if rng.bernoulli(0.5) {
                has[r] = true;
                let c = rng.uniform_range(0.5, 1.5);
                m.row_mut(r).iter_mut().zip(shared).for_each(|(x, s)| *x += c * s);
            }
        }
        (m, has)
    };
    let (a, has_a) = build(only_a, 1);
    let (b, has_b) = build(only_b, 2);
    let fit = crosscoder::train(&CrosscoderConfig { total_steps: 8000, ..quick(d, 13, 3, 4) }, &a, &b).unwrap();
    let stats = crosscoder::analyze(&fit.params, &a, &b, 0.01, 10).unwrap();
    let ranked = rank_cross_domain(&stats);
    let top = ranked[0];
    // Mean-centering makes either presence or absence of the planted atom a
    // positive direction; the strongest rows must sit on one side of it.
    let side = has_a[top.top_a[0]];
    assert!(top.top_a.iter().all(|&i| has_a[i] == side) && top.top_b.iter().all(|&i| has_b[i] == side));
    for s in &stats {
        if s.feature != top.feature {
            assert!(s.balance < top.balance);
        }
    }
    let counts = [FeatureLabel::AOnly, FeatureLabel::BOnly, FeatureLabel::AB, FeatureLabel::Dead]
        .map(|l| stats.iter().filter(|s| s.label == l).count());
    assert_eq!(counts.iter().sum::<usize>(), 13);
    assert!(stats.iter().all(|s| (0.0..=1.0).contains(&s.rate_a) && (0.0..=1.0).contains(&s.rate_b)));
}

#[test]
fn never_active_feature_is_dead() {
    let atoms = unit_atoms(4, 4, 1);
    let a = sparse_rows(&atoms, 50, 2, 0.0, 1);
    let norm = Normalizer::estimate(&a);
    let mut p = CrosscoderParams::init(&quick(4, 3, 1, 1), [norm.clone(), norm]);
    p.b_enc[2] = -1e9;
    let stats = crosscoder::analyze(&p, &a, &a, 0.01, 10).unwrap();
    assert_eq!(stats[2].label, FeatureLabel::Dead);
    assert!(stats[2].top_a.is_empty());
}

proptest! {
    #[test]
    fn top_k_support_is_exact(seed in 0u64..1000, k in 1usize..12) {
        let norm = Normalizer { mean: vec![0.0; 6], std: vec![1.0; 6] };
        let cfg = CrosscoderConfig { d: 6, features: 24, k, init_scale: 1.0, seed, ..CrosscoderConfig::default() };
        let p = CrosscoderParams::init(&cfg, [norm.clone(), norm]);
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let x: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let z = p.encode(&x, Domain::A);
        let positive = p.w_enc.data().chunks(6).filter(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() > 0.0).count();
        let support = z.iter().filter(|&&v| v != 0.0).count();
        prop_assert_eq!(support, positive.min(k));
        prop_assert!(z.iter().all(|&v| v >= 0.0));
    }
}
