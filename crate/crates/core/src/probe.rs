//! Linear probe from concatenated hidden states to a scalar sequence, trained
//! by nearest-neighbor matching against a bank of real windows, plus
//! coverage statistics and retrieval forecasting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::SeriesBank;
use crate::numerics::{power_spectrum, power_spectrum_vjp, Matrix, NumericsError, SeededRng};
use crate::optim::{Adam, AdamConfig};
use crate::tokenizer::STD_FLOOR;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("probe dimension mismatch: {0}")]
    Shape(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("non-finite probe loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ProbeParams {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }

    /// Gaussian weights with std `scale / √dim`.
    pub fn random(dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let s = scale / (dim as f64).sqrt();
        Self { w: (0..dim).map(|_| s * rng.gaussian()).collect(), b: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Weight of the spectral diversity penalty.
    pub lambda: f64,
    /// Candidates sampled per prediction for the assignment step.
    pub candidates: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub std_floor: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            candidates: 128,
            batch_size: 32,
            epochs: 100,
            lr: 1e-3,
            std_floor: STD_FLOOR,
            init_scale: 1.0,
            seed: 420,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, bank: usize) -> Result<(), ProbeError> {
        if self.candidates == 0 || self.candidates > bank {
            return Err(ProbeError::Config(format!(
                "candidates {} must lie in 1..={bank}",
                self.candidates
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.lambda >= 0.0) || !(self.std_floor > 0.0) {
            return Err(ProbeError::Config("batch_size, lr, std_floor must be positive; lambda >= 0".into()));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------------
// Forward

/// A z-scored probe output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub values: Vec<f64>,
    /// Raw output std before flooring.
    pub std: f64,
    pub floored: bool,
}

fn raw_output(params: &ProbeParams, features: &Matrix<f64>) -> Vec<f64> {
    (0..features.rows())
        .map(|t| features.row(t).iter().zip(&params.w).map(|(h, w)| h * w).sum::<f64>() + params.b)
        .collect()
}

fn zscore(raw: &[f64], floor: f64) -> ProbeOutput {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = std.max(floor);
    ProbeOutput { values: raw.iter().map(|v| (v - mean) / s).collect(), std, floored: std < floor }
}

fn check_dims(params: &ProbeParams, features: &[Matrix<f64>]) -> Result<(), ProbeError> {
    if let Some(f) = features.iter().find(|f| f.cols() != params.w.len()) {
        return Err(ProbeError::Shape(format!("features have {} columns, w has {}", f.cols(), params.w.len())));
    }
    Ok(())
}

/// `ŷ_t = w·h_t + b` per position, z-scored per sequence.
pub fn probe_forward(
    params: &ProbeParams,
    features: &[Matrix<f64>],
    std_floor: f64,
) -> Result<Vec<ProbeOutput>, ProbeError> {
    check_dims(params, features)?;
    Ok(features.iter().map(|f| zscore(&raw_output(params, f), std_floor)).collect())
}

pub fn sequence_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Index and MSE of the nearest candidate (ties go to the lowest index).
pub fn nearest(pred: &[f64], bank: &SeriesBank, candidates: impl IntoIterator<Item = usize>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for j in candidates {
        let m = sequence_mse(pred, &bank.windows[j]);
        if m < best.1 || (m == best.1 && j < best.0) {
            best = (j, m);
        }
    }
    best
}

// ----------------------------------------------------------------------------
// Objective

/// Half-spectrum without the DC bin.
fn psd_no_dc(x: &[f64]) -> Result<Vec<f64>, ProbeError> {
    Ok(power_spectrum(x)?[1..].to_vec())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean pairwise spectral cosine over all unordered pairs.
pub fn mean_psd_cosine(outputs: &[Vec<f64>]) -> Result<f64, ProbeError> {
    let psd = outputs.iter().map(|o| psd_no_dc(o)).collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..psd.len() {
        for j in (i + 1)..psd.len() {
            total += cosine(&psd[i], &psd[j]);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub mse: f64,
    pub penalty: f64,
}

/// Matching MSE to fixed targets plus `λ ·` mean pairwise PSD cosine, and its
/// gradient with respect to `w` and `b`.
pub fn objective(
    params: &ProbeParams,
    features: &[Matrix<f64>],
    targets: &[&[f64]],
    lambda: f64,
    std_floor: f64,
) -> Result<(ObjectiveValue, ProbeParams), ProbeError> {
    check_dims(params, features)?;
    let bsz = features.len();
    if bsz == 0 || targets.len() != bsz {
        return Err(ProbeError::Shape("features and targets must be non-empty and paired".into()));
    }
    let raws: Vec<Vec<f64>> = features.iter().map(|f| raw_output(params, f)).collect();
    let outs: Vec<ProbeOutput> = raws.iter().map(|r| zscore(r, std_floor)).collect();
    // ∂L/∂z per sequence.
    let mut dz: Vec<Vec<f64>> = Vec::with_capacity(bsz);
    let mut mse = 0.0;
    for (o, y) in outs.iter().zip(targets) {
        let t = o.values.len() as f64;
        if y.len() != o.values.len() {
            return Err(ProbeError::Shape(format!("target length {} vs {}", y.len(), o.values.len())));
        }
        mse += sequence_mse(&o.values, y) / bsz as f64;
        dz.push(o.values.iter().zip(y.iter()).map(|(z, y)| 2.0 * (z - y) / (t * bsz as f64)).collect());
    }
    let mut penalty = 0.0;
    if lambda > 0.0 && bsz >= 2 {
        let psd = outs.iter().map(|o| psd_no_dc(&o.values)).collect::<Result<Vec<_>, _>>()?;
        let norms: Vec<f64> = psd.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let pairs = (bsz * (bsz - 1) / 2) as f64;
        let mut dpsd = vec![vec![0.0; psd[0].len()]; bsz];
        for i in 0..bsz {
            for j in (i + 1)..bsz {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                let c = cosine(&psd[i], &psd[j]);
                penalty += c / pairs;
                let scale = lambda / pairs;
                for k in 0..psd[i].len() {
                    dpsd[i][k] += scale * (psd[j][k] / (norms[i] * norms[j]) - c * psd[i][k] / (norms[i] * norms[i]));
                    dpsd[j][k] += scale * (psd[i][k] / (norms[i] * norms[j]) - c * psd[j][k] / (norms[j] * norms[j]));
                }
            }
        }
        for i in 0..bsz {
            let mut full = vec![0.0];
            full.extend(&dpsd[i]);
            for (a, g) in dz[i].iter_mut().zip(power_spectrum_vjp(&outs[i].values, &full)) {
                *a += g;
            }
        }
    }
    // Chain through the z-score and the linear map.
    let mut grad = ProbeParams::zeros(params.w.len());
    for ((f, o), g) in features.iter().zip(&outs).zip(&dz) {
        let n = g.len() as f64;
        let gm = g.iter().sum::<f64>() / n;
        let dy: Vec<f64> = if o.floored {
            g.iter().map(|v| (v - gm) / std_floor).collect()
        } else {
            let gz = g.iter().zip(&o.values).map(|(a, z)| a * z).sum::<f64>() / n;
            g.iter().zip(&o.values).map(|(a, z)| (a - gm - z * gz) / o.std).collect()
        };
        for (t, d) in dy.iter().enumerate() {
            for (gw, h) in grad.w.iter_mut().zip(f.row(t)) {
                *gw += d * h;
            }
            grad.b += d;
        }
    }
    Ok((ObjectiveValue { total: mse + lambda * penalty, mse, penalty }, grad))
}

// ----------------------------------------------------------------------------
// EM training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub params: ProbeParams,
    pub history: Vec<EpochRecord>,
}

/// Alternates nearest-neighbor assignment over sampled candidates with an
/// Adam step on the objective, holding assignments fixed within the step.
pub fn em_train(
    features: &[Matrix<f64>],
    bank: &SeriesBank,
    cfg: &ProbeConfig,
    init: Option<ProbeParams>,
) -> Result<ProbeFit, ProbeError> {
    if features.is_empty() {
        return Err(ProbeError::Empty("feature set"));
    }
    if bank.is_empty() {
        return Err(ProbeError::Empty("bank"));
    }
    cfg.validate(bank.len())?;
    let t = features[0].rows();
    if bank.window_len() != t || features.iter().any(|f| f.rows() != t) {
        return Err(ProbeError::Shape(format!("sequence length {t} vs bank window {}", bank.window_len())));
    }
    let dim = features[0].cols();
    let root = SeededRng::new(cfg.seed);
    let mut params = init.unwrap_or_else(|| ProbeParams::random(dim, cfg.init_scale, &mut root.derive(0)));
    check_dims(&params, features)?;
    let mut adam = Adam::<f64>::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = root.derive(1 + epoch as u64);
        rng.shuffle(&mut order);
        let (mut loss, mut mse, mut pen, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let feats: Vec<Matrix<f64>> = chunk.iter().map(|&i| features[i].clone()).collect();
            let outs = probe_forward(&params, &feats, cfg.std_floor)?;
            let targets: Vec<&[f64]> = outs
                .iter()
                .map(|o| {
                    let cands = rng.sample_indices(bank.len(), cfg.candidates);
                    bank.windows[nearest(&o.values, bank, cands).0].as_slice()
                })
                .collect();
            let (value, grad) = objective(&params, &feats, &targets, cfg.lambda, cfg.std_floor)?;
            if !value.total.is_finite() {
                return Err(ProbeError::NonFinite { epoch });
            }
            adam.begin_step();
            adam.update(0, &mut params.w, &grad.w, cfg.lr, false);
            let mut b = [params.b];
            adam.update(1, &mut b, &[grad.b], cfg.lr, false);
            params.b = b[0];
            loss += value.total;
            mse += value.mse;
            pen += value.penalty;
            batches += 1;
        }
        let k = batches as f64;
        history.push(EpochRecord { epoch, loss: loss / k, mse: mse / k, penalty: pen / k });
    }
    Ok(ProbeFit { params, history })
}

// ----------------------------------------------------------------------------
// Coverage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub inputs: usize,
    pub distinct: usize,
    /// `distinct / inputs`.
    pub fraction: f64,
    pub mean_mse: f64,
    /// Full-bank nearest neighbor per input.
    pub assignments: Vec<(usize, f64)>,
    /// `K → mean of the K best deduplicated matches` (`None` when fewer
    /// than K distinct matches exist).
    pub fair_top_k: Vec<(usize, Option<f64>)>,
}

/// Mean of the `k` lowest per-entry best MSEs, deduplicating by bank entry.
pub fn fair_top_k(assignments: &[(usize, f64)], k: usize) -> Option<f64> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for &(j, m) in assignments {
        let e = best.entry(j).or_insert(m);
        *e = e.min(m);
    }
    if k == 0 || best.len() < k {
        return None;
    }
    let mut v: Vec<f64> = best.into_values().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(v[..k].iter().sum::<f64>() / k as f64)
}

pub fn coverage(
    params: &ProbeParams,
    features: &[Matrix<f64>],
    bank: &SeriesBank,
    std_floor: f64,
    ks: &[usize],
) -> Result<CoverageStats, ProbeError> {
    if features.is_empty() {
        return Err(ProbeError::Empty("feature set"));
    }
    if bank.is_empty() {
        return Err(ProbeError::Empty("bank"));
    }
    let outs = probe_forward(params, features, std_floor)?;
    let assignments: Vec<(usize, f64)> = outs.iter().map(|o| nearest(&o.values, bank, 0..bank.len())).collect();
    let distinct = assignments.iter().map(|a| a.0).collect::<std::collections::BTreeSet<_>>().len();
    let n = assignments.len();
    Ok(CoverageStats {
        inputs: n,
        distinct,
        fraction: distinct as f64 / n as f64,
        mean_mse: assignments.iter().map(|a| a.1).sum::<f64>() / n as f64,
        fair_top_k: ks.iter().map(|&k| (k, fair_top_k(&assignments, k))).collect(),
        assignments,
    })
}

/// One cell of the weights × inputs ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub fit: ProbeFit,
    pub coverage: CoverageStats,
}

/// Runs the identical probe protocol on each labelled feature set.
pub fn ablation_2x2(
    cells: &[(String, Vec<Matrix<f64>>)],
    bank: &SeriesBank,
    cfg: &ProbeConfig,
    ks: &[usize],
) -> Result<Vec<AblationCell>, ProbeError> {
    cells
        .iter()
        .map(|(label, features)| {
            let fit = em_train(features, bank, cfg, None)?;
            let coverage = coverage(&fit.params, features, bank, cfg.std_floor, ks)?;
            Ok(AblationCell { label: label.clone(), fit, coverage })
        })
        .collect()
}

// ----------------------------------------------------------------------------
// Retrieval forecasting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalForecast {
    pub index: usize,
    pub forecast: Vec<f64>,
    pub baseline: Vec<f64>,
    pub forecast_mse: f64,
    pub baseline_mse: f64,
}

/// Retrieves the projection closest to the query's first `split` values and
/// forecasts the rest with that projection's continuation.
pub fn retrieval_forecast(
    query: &[f64],
    projections: &[Vec<f64>],
    split: usize,
) -> Result<RetrievalForecast, ProbeError> {
    if projections.is_empty() {
        return Err(ProbeError::Empty("projection bank"));
    }
    let t = query.len();
    if split == 0 || split >= t {
        return Err(ProbeError::Shape(format!("split {split} must lie in 1..{t}")));
    }
    if let Some(p) = projections.iter().find(|p| p.len() != t) {
        return Err(ProbeError::Shape(format!("projection length {} vs query {t}", p.len())));
    }
    let (head, tail) = query.split_at(split);
    let mut best = (0usize, f64::INFINITY);
    for (j, p) in projections.iter().enumerate() {
        let m = sequence_mse(head, &p[..split]);
        if m < best.1 {
            best = (j, m);
        }
    }
    let forecast = projections[best.0][split..].to_vec();
    let baseline = vec![head[split - 1]; t - split];
    Ok(RetrievalForecast {
        index: best.0,
        forecast_mse: sequence_mse(&forecast, tail),
        baseline_mse: sequence_mse(&baseline, tail),
        forecast,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub queries: usize,
    pub retrieval_mse: f64,
    pub last_value_mse: f64,
    /// Fraction of queries where retrieval has strictly lower MSE.
    pub win_rate: f64,
}

pub fn retrieval_summary(results: &[RetrievalForecast]) -> Result<RetrievalSummary, ProbeError> {
    if results.is_empty() {
        return Err(ProbeError::Empty("retrieval results"));
    }
    let n = results.len() as f64;
    Ok(RetrievalSummary {
        queries: results.len(),
        retrieval_mse: results.iter().map(|r| r.forecast_mse).sum::<f64>() / n,
        last_value_mse: results.iter().map(|r| r.baseline_mse).sum::<f64>() / n,
        win_rate: results.iter().filter(|r| r.forecast_mse < r.baseline_mse).count() as f64 / n,
    })
}
