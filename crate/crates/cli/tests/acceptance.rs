//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p tslab-cli --test acceptance -- --nocapture` (the
//! target has no libtest harness, so output is always shown). The process
//! exits nonzero when a criterion fails unexpectedly. The step-1 alignment
//! ratio of the transfer study is a documented known failure: it prints FAIL
//! but does not fail the target.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use tslab::circuits::{
    self, alternating_sequences, constant_sequences, copy_head_model, mask_of, redundant_pair_model, selectivity,
    superadditivity, ComponentId,
};
use tslab::crosscoder::{self, top_k_support, CrosscoderConfig, CrosscoderParams, Domain, Normalizer};
use tslab::datagen::SeriesBank;
use tslab::forecaster::{logits_to_categorical, quantile_from_cdf, ForecastConfig, QuantileForecast, QuantileGrid};
use tslab::geometry::{
    erank_from_eigenvalues, effective_rank, gradient_alignment, phase_coherence, COHERENCE_EXCLUDE, ERANK_EXCLUDE,
};
use tslab::metrics::{evaluate_forecast, METRIC_NAMES};
use tslab::model::{AblationMask, Model, ModelConfig};
use tslab::numerics::{Matrix, SeededRng};
use tslab::probe::{em_train, mean_psd_cosine, probe_forward, retrieval_forecast, retrieval_summary, ProbeConfig};
use tslab::tokenizer::{BinTokenizerConfig, STD_FLOOR};
use tslab::trainer::Example;
use tslab::transfer::{run_seed, verdict, TransferConfig};
use tslab_cli::report::{fixture, read_composition, read_forecast_example, read_ablation, Exact, FairTopKTable, RetrievalRow};

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-15
}

// ----------------------------------------------------------------------------
// 1. Metric oracle

struct OracleCase {
    levels: Vec<f64>,
    values: Vec<Vec<f64>>,
    mean: f64,
    std: f64,
    y: Vec<f64>,
    m: usize,
    y0: f64,
}

fn oracle_case(i: usize, rng: &mut SeededRng) -> OracleCase {
    let levels = QuantileGrid::default().levels().to_vec();
    let h = 2 + rng.below(30);
    let mean = rng.uniform_range(-5.0, 5.0);
    let std = if i % 7 == 3 { 0.0 } else { rng.uniform_range(0.1, 3.0) };
    let values: Vec<Vec<f64>> = (0..h)
        .map(|_| {
            let mut r: Vec<f64> = levels.iter().map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            r.sort_by(f64::total_cmp);
            r
        })
        .collect();
    let mut y: Vec<f64> = (0..h)
        .map(|_| match i % 10 {
            0 => 0.0,
            1 => 2.5,
            _ => mean + std * rng.gaussian(),
        })
        .collect();
    if i % 2 == 1 {
        for v in y.iter_mut() {
            if rng.uniform() < 0.3 {
                *v = f64::NAN;
            }
        }
        if y.iter().all(|v| v.is_nan()) {
            y[h / 2] = mean;
        }
    }
    OracleCase { levels, values, mean, std, y, m: 1 + rng.below(3), y0: mean + rng.gaussian() }
}

/// Every metric computed by brute force from the definitions.
fn brute_metrics(c: &OracleCase) -> Vec<(&'static str, Option<f64>)> {
    let s = c.std.max(STD_FLOOR);
    let den: Vec<Vec<f64>> = c.values.iter().map(|r| r.iter().map(|v| v * s + c.mean).collect()).collect();
    let mut mid = 0;
    for (q, l) in c.levels.iter().enumerate() {
        if (l - 0.5).abs() < (c.levels[mid] - 0.5).abs() {
            mid = q;
        }
    }
    let keep: Vec<usize> = (0..c.y.len()).filter(|&t| !c.y[t].is_nan()).collect();
    let t: Vec<f64> = keep.iter().map(|&k| c.y[k]).collect();
    let p: Vec<f64> = keep.iter().map(|&k| den[k][mid]).collect();
    let n = t.len() as f64;

    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut ya = 0.0;
    let mut mape = 0.0;
    let mut smape = 0.0;
    let mut hits = 0.0;
    for i in 0..t.len() {
        let e = t[i] - p[i];
        sq += e * e;
        ab += e.abs();
        ya += t[i].abs();
        mape += e.abs() / (t[i].abs() + 1e-8);
        smape += e.abs() / (t[i].abs() + p[i].abs() + 1e-8);
        let sa = (p[i] - c.y0).partial_cmp(&0.0).unwrap();
        let sb = (t[i] - c.y0).partial_cmp(&0.0).unwrap();
        if sa == sb {
            hits += 1.0;
        }
    }
    let mse = sq / n;
    let mae = ab / n;
    let mase = if t.len() > c.m {
        let mut naive = 0.0;
        for i in c.m..t.len() {
            naive += (t[i] - t[i - c.m]).abs();
        }
        naive /= (t.len() - c.m) as f64;
        (naive != 0.0).then(|| mae / naive)
    } else {
        None
    };
    let pearson = {
        let mp = p.iter().sum::<f64>() / n;
        let mt = t.iter().sum::<f64>() / n;
        let cov: f64 = (0..t.len()).map(|i| (p[i] - mp) * (t[i] - mt)).sum();
        let vp: f64 = p.iter().map(|x| (x - mp) * (x - mp)).sum();
        let vt: f64 = t.iter().map(|x| (x - mt) * (x - mt)).sum();
        (t.len() >= 2 && vp > 0.0 && vt > 0.0).then(|| cov / (vp * vt).sqrt())
    };

    let nq = c.levels.len();
    let mut crps = 0.0;
    let mut ql_total = 0.0;
    for q in 0..nq {
        let tau = c.levels[q];
        let mut ql = 0.0;
        for &k in &keep {
            let u = c.y[k] - den[k][q];
            ql += if c.y[k] > den[k][q] { tau * u } else { (tau - 1.0) * u };
        }
        let below = if q == 0 { 0.0 } else { c.levels[q - 1] };
        let above = if q + 1 == nq { 1.0 } else { c.levels[q + 1] };
        crps += 2.0 * (above - below) / 2.0 * ql / n;
        ql_total += ql;
    }
    let wmape = (ya != 0.0).then(|| ql_total / nq as f64 / ya);

    vec![
        ("crps", Some(crps)),
        ("mse", Some(mse)),
        ("mae", Some(mae)),
        ("mase", mase),
        ("rmse", Some(mse.sqrt())),
        ("nrmse", (ya != 0.0).then(|| mse.sqrt() / (ya / n))),
        ("nd", (ya != 0.0).then(|| ab / ya)),
        ("mape", Some(100.0 * mape / n)),
        ("smape", Some(200.0 * smape / n)),
        ("wmape", wmape),
        ("da", Some(hits / n)),
        ("pearson", pearson),
    ]
}

fn metric_oracle() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut compared = 0;
    let mut masked = 0;
    for i in 0..50 {
        let c = oracle_case(i, &mut rng);
        if c.y.iter().any(|v| v.is_nan()) {
            masked += 1;
        }
        let f = QuantileForecast { levels: c.levels.clone(), values: c.values.clone(), mean: c.mean, std: c.std };
        let rec = evaluate_forecast(&f, &c.y, c.m, c.y0).map_err(|e| e.to_string())?;
        let brute = brute_metrics(&c);
        ensure(brute.len() == METRIC_NAMES.len(), "metric list mismatch")?;
        for (name, want) in brute {
            let got = rec.get(name);
            match (got, want) {
                (Some(a), Some(b)) => ensure(rel_close(a, b, 1e-9), format!("case {i} {name}: {a} vs {b}"))?,
                (None, None) => {}
                _ => return Err(format!("case {i} {name}: defined {:?} vs {:?}", got, want)),
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} values on 50 pairs ({masked} NaN-masked)"))
}

// ----------------------------------------------------------------------------
// 2. Quantile machinery

/// Smallest `x` with `F(x) ≥ τ` by a 10⁵-point scan and bisection.
fn cdf_search(probs: &[f64], tok: &BinTokenizerConfig, tau: f64) -> f64 {
    let w = 2.0 * tok.bound / probs.len() as f64;
    let cdf = |x: f64| -> f64 {
        probs
            .iter()
            .enumerate()
            .map(|(b, p)| p * ((x - (-tok.bound + b as f64 * w)) / w).clamp(0.0, 1.0))
            .sum()
    };
    let n = 100_000;
    let xs = |i: usize| -tok.bound + 2.0 * tok.bound * i as f64 / n as f64;
    let hit = (0..=n).find(|&i| cdf(xs(i)) >= tau).unwrap_or(n);
    if hit == 0 {
        return xs(0);
    }
    let (mut lo, mut hi) = (xs(hit - 1), xs(hit));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn quantile_machinery() -> Outcome {
    let tok = BinTokenizerConfig { vocab_size: 16, bound: 3.0 };
    let levels = QuantileGrid::default().levels().to_vec();
    let mut rng = SeededRng::new(77);
    let mut worst_q: f64 = 0.0;
    for case in 0..40 {
        let logits: Vec<f64> = (0..16).map(|_| 2.0 * rng.gaussian()).collect();
        let mut p = logits_to_categorical(&logits, 1.0);
        if case % 4 == 0 {
            // Empty bins leave flat stretches in the CDF.
            for b in (0..16).step_by(3) {
                p[b] = 0.0;
            }
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
        }
        let mut taus = levels.clone();
        taus.extend((0..5).map(|_| rng.uniform_range(0.01, 0.99)));
        for tau in taus {
            let got = quantile_from_cdf(&p, &tok, tau).value;
            let want = cdf_search(&p, &tok, tau);
            worst_q = worst_q.max((got - want).abs());
            ensure((got - want).abs() < 1e-6, format!("case {case} τ={tau}: {got} vs {want}"))?;
        }
    }

    let mut worst_g: f64 = 0.0;
    for temperature in [1.0, 0.3] {
        let fc = ForecastConfig { tokenizer: tok.clone(), temperature, ..ForecastConfig::default() };
        for case in 0..30 {
            let logits: Vec<f64> = (0..17).map(|_| rng.gaussian()).collect();
            let y = rng.uniform_range(-2.5, 2.5);
            let (_, an) = fc.loss_and_grad(&logits, y);
            let h = 1e-5;
            let fd: Vec<f64> = (0..17)
                .map(|i| {
                    let mut up = logits.clone();
                    up[i] += h;
                    let mut dn = logits.clone();
                    dn[i] -= h;
                    (fc.loss_and_grad(&up, y).0 - fc.loss_and_grad(&dn, y).0) / (2.0 * h)
                })
                .collect();
            let scale = an.iter().chain(&fd).fold(0.0f64, |m, v| m.max(v.abs()));
            let err = an.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            worst_g = worst_g.max(rel);
            ensure(rel < 1e-4, format!("T={temperature} case {case}: relative gradient error {rel:.2e}"))?;
        }
    }
    Ok(format!("max CDF error {worst_q:.1e}, max gradient rel. error {worst_g:.1e}"))
}

// ----------------------------------------------------------------------------
// 3. Model gradients

fn model_gradients() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 13,
        max_positions: 12,
        init_scale: 1.0,
        seed: 5,
    };
    let mut model = Model::<f64>::init(cfg).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(6);
    // Move off the init so biases and norms are not at special values.
    for (_, m) in model.params.named_mut() {
        for v in m.data_mut() {
            *v += 0.1 * rng.gaussian();
        }
    }
    let tokens: Vec<u32> = (0..10).map(|_| rng.below(13) as u32).collect();
    let weights = Matrix::from_fn(10, 13, |_, _| rng.gaussian());
    let mask = AblationMask::none();
    let loss = |m: &Model<f64>| -> f64 {
        let out = m.forward(&tokens, &mask, false).unwrap();
        out.logits.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = model.forward_cached(&tokens, &mask, None).map_err(|e| e.to_string())?;
    let mut grads = model.params.zeros_like();
    model.backward(&cache, &weights, &mut grads);

    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    let n = model.params.named().len();
    for idx in 0..n {
        let name = model.params.named()[idx].0.clone();
        let an = grads.named()[idx].1.data().to_vec();
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (e, a) in an.iter().enumerate() {
            let orig = model.params.named()[idx].1.data()[e];
            model.params.named_mut()[idx].1.data_mut()[e] = orig + h;
            let up = loss(&model);
            model.params.named_mut()[idx].1.data_mut()[e] = orig - h;
            let dn = loss(&model);
            model.params.named_mut()[idx].1.data_mut()[e] = orig;
            let fd = (up - dn) / (2.0 * h);
            err = err.max((fd - a).abs());
            scale = scale.max(fd.abs()).max(a.abs());
        }
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        if rel >= worst.1 {
            worst = (name.clone(), rel);
        }
        ensure(rel < 1e-3, format!("{name}: relative error {rel:.2e}"))?;
    }
    Ok(format!("{n} tensors, worst {} at {:.1e}", worst.0, worst.1))
}

// ----------------------------------------------------------------------------
// 4. Fixture formulas

fn exact(n: i64, d: i64) -> Exact {
    Ratio::new(n, d)
}

fn e<T>(r: Result<T, tslab_cli::report::ReportError>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn dist(a: Exact, b: Exact) -> Exact {
    if a > b { a - b } else { b - a }
}

fn fixture_formulas() -> Outcome {
    let abl = e(read_ablation(&fixture("component_ablation.csv")))?;
    let row = &abl[0];
    ensure(row.delta_periodic == exact(575, 100) && row.delta_control == exact(231, 100), "ablation deltas")?;
    let s = selectivity(row.delta_periodic, row.delta_control);
    ensure(s == exact(344, 100) && s == row.selectivity, format!("selectivity {s}"))?;

    let comp = e(read_composition(&fixture("composition.csv")))?;
    let rho: Vec<Exact> = comp.iter().map(|c| superadditivity(c.combined, &[c.sum_individual]).unwrap()).collect();
    ensure(rho[0] == exact(1550, 1025), format!("ρ₁ = {}", rho[0]))?;
    ensure(dist(rho[0], exact(1512, 1000)) < exact(5, 10_000), "ρ₁ ≉ 1.512")?;
    ensure(rho[0] > exact(12, 10), "ρ₁ ≤ 1.2")?;
    ensure(rho[1] == exact(1830, 2365), format!("ρ₂ = {}", rho[1]))?;
    ensure(dist(rho[1], exact(774, 1000)) < exact(5, 10_000), "ρ₂ ≉ 0.774")?;
    ensure(rho[1] < exact(1, 1), "ρ₂ ≥ 1")?;

    let top = e(FairTopKTable::read(&fixture("fair_top_k.csv")))?;
    let order = top.ordering(4);
    let names: Vec<&str> = order.iter().map(|o| o.0).collect();
    ensure(names == ["text_pt", "rand_pt", "text_randinit", "rand_randinit"], format!("K=4 order {names:?}"))?;
    let vals: Vec<Exact> = order.iter().map(|o| o.1).collect();
    ensure(vals == [exact(254, 1000), exact(330, 1000), exact(383, 1000), exact(412, 1000)], "K=4 values")?;
    ensure(vals.windows(2).all(|w| w[0] < w[1]), "K=4 not strictly ordered")?;

    let r = e(RetrievalRow::read(&fixture("retrieval_summary.csv")))?;
    ensure(r.retrieval_mse == exact(191, 100) && r.last_value_mse == exact(227, 100), "retrieval values")?;
    ensure(r.retrieval_mse < r.last_value_mse, "retrieval ≥ last value")?;

    let (a, b) = e(read_forecast_example(&fixture("forecast_example.csv")))?;
    ensure(a == exact(42, 100) && b == exact(117, 10), format!("pair {a}, {b}"))?;
    ensure(a < b, "pair not ordered")?;
    Ok(format!("selectivity {s}, ρ = {} / {}, K=4 {names:?}", rho[0], rho[1]))
}

// ----------------------------------------------------------------------------
// 5. Geometry

fn orthogonal(d: usize, rng: &mut SeededRng) -> Matrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

fn geometry() -> Outcome {
    let g = |r: Result<f64, tslab::geometry::GeometryError>| r.map_err(|e| e.to_string());
    let iso = g(erank_from_eigenvalues(&[1.0; 5]))?;
    ensure((iso - 5.0).abs() < 1e-12, format!("isotropic erank {iso}"))?;
    let one = g(erank_from_eigenvalues(&[4.0, 0.0, 0.0, 0.0]))?;
    ensure((one - 1.0).abs() < 1e-12, format!("rank-1 erank {one}"))?;
    let pair = g(erank_from_eigenvalues(&[3.0, 1.0]))?;
    let want = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
    ensure((pair - 1.75477).abs() < 1e-4 && (pair - want).abs() < 1e-12, format!("(3,1) erank {pair}"))?;

    let mut rng = SeededRng::new(41);
    let mut worst_inv: f64 = 0.0;
    for _ in 0..5 {
        let scales: Vec<f64> = (0..6).map(|j| 0.3 + j as f64).collect();
        let x = Matrix::from_fn(200, 6, |_, j| scales[j] * rng.gaussian());
        let q = orthogonal(6, &mut rng);
        let xq = Matrix::from_fn(200, 6, |i, j| (0..6).map(|k| x[(i, k)] * q[(k, j)]).sum::<f64>());
        let a = g(effective_rank(&x, ERANK_EXCLUDE))?;
        let b = g(effective_rank(&xq, ERANK_EXCLUDE))?;
        worst_inv = worst_inv.max((a - b).abs());
    }
    ensure(worst_inv < 1e-8, format!("orthogonal invariance {worst_inv:.1e}"))?;

    let v: Vec<f64> = (0..10).map(|_| rng.gaussian()).collect();
    let dup = gradient_alignment(&vec![v.clone(); 4]).map_err(|e| e.to_string())?.value;
    ensure((dup - 1.0).abs() < 1e-12, format!("duplicated alignment {dup}"))?;
    let a = vec![1.0, 0.0, 0.0];
    let b = vec![0.0, 2.0, 0.0];
    let third = gradient_alignment(&[a.clone(), a, b]).map_err(|e| e.to_string())?.value;
    ensure((third - 1.0 / 3.0).abs() < 1e-12, format!("(1,0,0) alignment {third}"))?;

    let period = 8;
    let protos: Vec<Vec<f64>> = (0..period).map(|_| (0..16).map(|_| rng.gaussian()).collect()).collect();
    let periodic = Matrix::from_fn(64, 16, |t, j| protos[t % period][j]);
    let pc = phase_coherence(&periodic, period, COHERENCE_EXCLUDE).map_err(|e| e.to_string())?;
    ensure((pc.one_minus - 1.0).abs() < 1e-12, format!("periodic 1 − coherence {}", pc.one_minus))?;

    let mut worst_iid: f64 = 0.0;
    for seed in 0..20 {
        let mut r = SeededRng::new(1000 + seed);
        let noise = Matrix::from_fn(512, 64, |_, _| r.gaussian());
        let c = phase_coherence(&noise, period, COHERENCE_EXCLUDE).map_err(|e| e.to_string())?;
        worst_iid = worst_iid.max((c.coherence - 1.0).abs());
    }
    ensure(worst_iid < 0.05, format!("iid |coherence − 1| = {worst_iid}"))?;
    Ok(format!("erank(3,1) = {pair:.5}, invariance {worst_inv:.1e}, iid |c−1| ≤ {worst_iid:.4}"))
}

// ----------------------------------------------------------------------------
// 6–7. Probe and retrieval

fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - m) / s).collect()
}

fn waves(n: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n)
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
        .collect()
}

fn probe_em() -> Outcome {
    const T: usize = 16;
    // Closed under negation: the z-scored output cannot fix the probe's sign.
    let base = waves(16, T, 11);
    let neg: Vec<Vec<f64>> = base.iter().map(|w| w.iter().map(|v| -v).collect()).collect();
    let bank = SeriesBank::from_windows(base.into_iter().chain(neg).collect());
    let mut rng = SeededRng::new(12);
    let planted: Vec<Matrix<f64>> = (0..64)
        .map(|i| {
            let w = &bank.windows[i % bank.len()];
            Matrix::from_fn(T, 4, |t, j| if j == 0 { w[t] } else { rng.gaussian() })
        })
        .collect();
    let cfg = ProbeConfig { lambda: 0.0, candidates: 32, batch_size: 16, epochs: 100, lr: 0.05, ..ProbeConfig::default() };
    let fit = em_train(&planted, &bank, &cfg, None).map_err(|e| e.to_string())?;
    let first = fit.history[0].loss;
    let last = fit.history.last().unwrap().loss;
    ensure(last < 1e-3 * first, format!("planted loss {first:.3e} -> {last:.3e}"))?;

    let wave_bank = SeriesBank::from_windows(waves(64, T, 21));
    let mut pairs = Vec::new();
    for seed in 1..=5u64 {
        let mut r = SeededRng::new(100 + seed);
        let feats: Vec<Matrix<f64>> = (0..64)
            .map(|_| {
                let raw = Matrix::from_fn(T + 2, 8, |_, _| r.gaussian());
                Matrix::from_fn(T, 8, |t, j| raw[(t, j)] + raw[(t + 1, j)] + 0.5 * raw[(t + 2, j)])
            })
            .collect();
        let psd = |lambda: f64| -> Result<f64, String> {
            let cfg = ProbeConfig { lambda, candidates: 32, batch_size: 16, epochs: 40, lr: 0.02, seed, ..ProbeConfig::default() };
            let fit = em_train(&feats, &wave_bank, &cfg, None).map_err(|e| e.to_string())?;
            let outs: Vec<Vec<f64>> = probe_forward(&fit.params, &feats, STD_FLOOR)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|o| o.values)
                .collect();
            mean_psd_cosine(&outs).map_err(|e| e.to_string())
        };
        let (off, on) = (psd(0.0)?, psd(0.5)?);
        ensure(on < off, format!("seed {seed}: λ=0.5 {on:.4} ≥ λ=0 {off:.4}"))?;
        pairs.push(format!("{on:.3}<{off:.3}"));
    }
    Ok(format!("planted {first:.2e} -> {last:.2e}; PSD cosine {}", pairs.join(" ")))
}

fn retrieval() -> Outcome {
    let (n, t, split) = (500, 32, 24);
    let bank = waves(200, t, 31);
    let mut rng = SeededRng::new(32);
    let queries: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                bank[rng.below(bank.len())].iter().map(|v| v + 0.05 * rng.gaussian()).collect()
            } else {
                let mut x = 0.0;
                zscore(&(0..t).map(|_| {
                    x += rng.gaussian();
                    x
                }).collect::<Vec<_>>())
            }
        })
        .collect();
    let results = queries
        .iter()
        .map(|q| retrieval_forecast(q, &bank, split))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let s = retrieval_summary(&results).map_err(|e| e.to_string())?;
    ensure(s.retrieval_mse < s.last_value_mse, format!("{} ≥ {}", s.retrieval_mse, s.last_value_mse))?;
    for (q, r) in queries.iter().zip(&results) {
        let mut moved = q.clone();
        for v in &mut moved[split..] {
            *v += 10.0 * rng.gaussian();
        }
        let m = retrieval_forecast(&moved, &bank, split).map_err(|e| e.to_string())?;
        ensure(m.index == r.index, "retrieved index depends on the hidden half")?;
    }
    Ok(format!("retrieval MSE {:.4} < last value {:.4}", s.retrieval_mse, s.last_value_mse))
}

// ----------------------------------------------------------------------------
// 8. Crosscoder

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

/// Positive entries ranked by value then index, first `k`, sorted.
fn support_by_sort(pre: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pre.len()).filter(|&i| pre[i] > 0.0).collect();
    idx.sort_by(|a, b| pre[*b].partial_cmp(&pre[*a]).unwrap().then(a.cmp(b)));
    idx.truncate(k);
    idx.sort();
    idx
}

fn crosscoder_checks() -> Outcome {
    let mut rng = SeededRng::new(88);
    let (d, f, k) = (16, 64, 8);
    let cfg = CrosscoderConfig { d, features: f, k, seed: 3, ..CrosscoderConfig::default() };
    let sample = Matrix::from_fn(50, d, |_, _| rng.gaussian());
    let mut params = CrosscoderParams::init(&cfg, [Normalizer::estimate(&sample), Normalizer::estimate(&sample)]);
    for v in params.b_enc.iter_mut().chain(params.b_dec[1].iter_mut()) {
        *v = 0.1 * rng.gaussian();
    }
    for i in 0..10_000 {
        let x: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let domain = if i % 2 == 0 { Domain::A } else { Domain::B };
        let dec = &params.b_dec[if i % 2 == 0 { 0 } else { 1 }];
        let pre: Vec<f64> = (0..f)
            .map(|r| (0..d).map(|c| params.w_enc[(r, c)] * (x[c] - dec[c])).sum::<f64>() + params.b_enc[r])
            .collect();
        let z = params.encode(&x, domain);
        let support: Vec<usize> = (0..f).filter(|&j| z[j] != 0.0).collect();
        let want = support_by_sort(&pre, k);
        ensure(support == want, format!("encode {i}: support {support:?} vs {want:?}"))?;
        for &j in &want {
            ensure(rel_close(z[j], pre[j], 1e-12), format!("encode {i}: value {j}"))?;
        }
        // Coarse values force ties, which must go to the lower index.
        let coarse: Vec<f64> = (0..f).map(|_| (rng.gaussian() * 2.0).round()).collect();
        ensure(top_k_support(&coarse, k, None) == support_by_sort(&coarse, k), format!("tied vector {i}"))?;
    }

    let atoms = unit_atoms(32, 32, 7);
    let a = sparse_rows(&atoms, 4000, 4, 0.0, 1);
    let b = sparse_rows(&atoms, 4000, 4, 0.0, 2);
    let fit = crosscoder::train(&quick(32, 64, 4, 420), &a, &b).map_err(|e| e.to_string())?;
    let gain = fit.initial_mse / fit.final_mse;
    ensure(gain >= 10.0, format!("planted MSE {} -> {}", fit.initial_mse, fit.final_mse))?;

    let atoms = unit_atoms(32, 128, 7);
    let mut dead = Vec::new();
    for seed in 1..=3u64 {
        let a = sparse_rows(&atoms, 4000, 4, 1.0, 10 + seed);
        let b = sparse_rows(&atoms, 4000, 4, 1.0, 20 + seed);
        let base = CrosscoderConfig { aux_k: 32, total_steps: 2000, ..quick(32, 128, 4, seed) };
        let off = crosscoder::train(&CrosscoderConfig { aux_weight: 0.0, ..base.clone() }, &a, &b)
            .map_err(|e| e.to_string())?
            .final_dead_fraction();
        let on = crosscoder::train(&base, &a, &b).map_err(|e| e.to_string())?.final_dead_fraction();
        ensure(on < off, format!("seed {seed}: dead {on} with AuxK vs {off} without"))?;
        dead.push(format!("{on:.3}<{off:.3}"));
    }
    Ok(format!("10⁴ supports exact, MSE ÷{gain:.0}, dead {}", dead.join(" ")))
}

// ----------------------------------------------------------------------------
// 9. Circuits

fn circuit_checks() -> Outcome {
    let (v, len) = (5, 12);
    let p: Vec<Example> = alternating_sequences(v, len).iter().map(|s| Example::next_token(s)).collect();
    let c: Vec<Example> = constant_sequences(v, len).iter().map(|s| Example::next_token(s)).collect();
    let fc = ForecastConfig::default();
    let e = |x: circuits::CircuitError| x.to_string();

    let copy = copy_head_model(v);
    let report = circuits::sweep(&copy, &p, &c, &fc).map_err(e)?;
    let head = report.get(&ComponentId::head(0, 0)).ok_or("no copy head")?;
    ensure(head.selectivity > 0.0, format!("copy head selectivity {}", head.selectivity))?;
    let zero = report.get(&ComponentId::head(0, 1)).ok_or("no inert head")?;
    ensure(
        zero.delta_periodic.abs() < 1e-6 && zero.delta_control.abs() < 1e-6,
        format!("zero-output head ΔL {} / {}", zero.delta_periodic, zero.delta_control),
    )?;

    let pair_model = redundant_pair_model(v);
    let pair_report = circuits::sweep(&pair_model, &p, &c, &fc).map_err(e)?;
    let pair = vec![ComponentId::head(0, 0), ComponentId::head(0, 1)];
    let comp = circuits::compose(&pair_model, &[pair], &pair_report, &p, &c, &fc).map_err(e)?;
    let rho = comp[0].rho.ok_or("ρ undefined")?;
    ensure(rho < 1.0, format!("redundant pair ρ = {rho}"))?;

    for tokens in alternating_sequences(v, len) {
        let base = copy.forward(&tokens, &AblationMask::none(), false).map_err(|e| e.to_string())?.logits;
        let empty = copy.forward(&tokens, &mask_of(&[]), false).map_err(|e| e.to_string())?.logits;
        let same = base.data().iter().zip(empty.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, "empty-mask forward differs from baseline")?;
    }
    Ok(format!("selectivity {:.3}, inert ΔL {:.1e}, ρ = {rho:.3}", head.selectivity, zero.delta_periodic.abs()))
}

// ----------------------------------------------------------------------------
// 10. Transfer study

fn transfer_study() -> Outcome {
    let cfg = TransferConfig::default();
    let mut counts = [0usize; 4];
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let run = run_seed::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
        let v = verdict(&run).map_err(|e| e.to_string())?;
        for (slot, ok) in [v.alignment_holds, v.transfer_holds, v.erank_holds, v.coherence_holds].iter().enumerate() {
            counts[slot] += usize::from(*ok);
        }
        let ratio = v.transfer.as_ref().map_or(f64::NAN, |t| t.ratio);
        lines.push(format!(
            "  seed {seed}: (a) alignment {:.3} vs {:.3} {}; (b) D_T ratio {ratio:.3} {}; (c) erank {:.2}/{:.3} vs {:.2}/{:.3} {}; (d) 1-coh {:.4} vs {:.4} {}",
            v.alignment.0,
            v.alignment.1,
            mark(v.alignment_holds),
            mark(v.transfer_holds),
            v.erank.1 .0,
            v.erank.1 .1,
            v.erank.0 .0,
            v.erank.0 .1,
            mark(v.erank_holds),
            v.coherence.0,
            v.coherence.1,
            mark(v.coherence_holds),
        ));
    }
    let summary = format!("(a) {}/3, (b) {}/3, (c) {}/3, (d) {}/3\n{}", counts[0], counts[1], counts[2], counts[3], lines.join("\n"));
    if counts.iter().all(|&c| c == 3) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

/// Sub-criteria (b)–(d) must hold; only (a) is allowed to fail.
fn transfer_expected(detail: &str) -> bool {
    ["(b) 3/3", "(c) 3/3", "(d) 3/3"].iter().all(|s| detail.contains(s))
}

// ----------------------------------------------------------------------------
// 11. Determinism

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) -> Result<(), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let run = |args: &[&str]| -> Result<String, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_tslab"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .env("TSLAB_OUTPUT_ROOT", root)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        Ok(String::from_utf8_lossy(&o.stdout).trim().to_string())
    };
    let data = run(&["datagen"])?;
    let pre = run(&["pretrain", "--data", &data])?;
    let pre_ck = format!("{pre}/model.ckpt");
    let ft = run(&["finetune", "--name", "ft", "--data", &data, "--init", &pre_ck])?;
    let ft_ck = format!("{ft}/model.ckpt");
    let ev = run(&["evaluate", "--data", &data, "--checkpoint", &ft_ck])?;
    let geo = run(&["geometry", "--data", &data, "--checkpoint", &pre_ck, "--checkpoint", &ft_ck])?;
    let probe = run(&["probe", "--data", &data, "--checkpoint", &pre_ck])?;
    run(&["retrieve", "--data", &data, "--probe", &probe])?;
    run(&["crosscoder", "--data", &data, "--base", &pre_ck, "--finetuned", &ft_ck])?;
    run(&["circuits", "--data", &data, "--checkpoint", &ft_ck])?;
    run(&["report", "--run", &ft, "--run", &ev, "--run", &geo, "--run", &probe])?;
    Ok(())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure(fa.len() == fb.len(), format!("{} vs {} files", fa.len(), fb.len()))?;
    for (x, y) in fa.iter().zip(&fb) {
        let rel = x.strip_prefix(a.path()).unwrap();
        ensure(rel == y.strip_prefix(b.path()).unwrap(), format!("file sets differ at {}", rel.display()))?;
        let same = std::fs::read(x).map_err(|e| e.to_string())? == std::fs::read(y).map_err(|e| e.to_string())?;
        ensure(same, format!("{} differs", rel.display()))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", fa.len()))
}

// ----------------------------------------------------------------------------

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: "1", name: "metric oracle equivalence", budget: secs(5), run: metric_oracle },
        Criterion { id: "2", name: "quantile machinery", budget: secs(30), run: quantile_machinery },
        Criterion { id: "3", name: "model gradients", budget: secs(60), run: model_gradients },
        Criterion { id: "4", name: "fixture formulas (exact)", budget: secs(1), run: fixture_formulas },
        Criterion { id: "5", name: "geometry properties", budget: secs(60), run: geometry },
        Criterion { id: "6", name: "probe EM", budget: secs(300), run: probe_em },
        Criterion { id: "7", name: "retrieval", budget: secs(60), run: retrieval },
        Criterion { id: "8", name: "crosscoder", budget: secs(300), run: crosscoder_checks },
        Criterion { id: "9", name: "circuits", budget: secs(120), run: circuit_checks },
        Criterion { id: "10", name: "transfer study (3 seeds)", budget: secs(900), run: transfer_study },
        Criterion { id: "11", name: "determinism", budget: secs(300), run: determinism },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = Vec::new();
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| o == c.id) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let in_time = took <= c.budget;
        let (passed, detail) = match &result {
            Ok(d) => (in_time, d.clone()),
            Err(d) => (false, d.clone()),
        };
        let timing = format!("{:.1}s / {}s", took.as_secs_f64(), c.budget.as_secs());
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag} [{:>2}] {} ({timing}): {detail}", c.id, c.name);
        if !passed {
            let known = c.id == "10" && in_time && transfer_expected(&detail);
            if known {
                println!("     known failure: step-1 alignment ratio (a) is not reproduced");
            } else {
                unexpected.push(c.id);
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
