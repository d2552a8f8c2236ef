//! Shared-encoder, two-decoder Top-K sparse crosscoder with AuxK recovery of
//! dead features, and per-feature cross-domain firing statistics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, SeededRng};
use crate::optim::{Adam, AdamConfig, Schedule};

#[derive(Debug, Error, PartialEq)]
pub enum CrosscoderError {
    #[error("invalid crosscoder config: {0}")]
    Config(String),
    #[error("empty activation dump for domain {0:?}")]
    EmptyDump(Domain),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    fn idx(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrosscoderConfig {
    pub d: usize,
    pub features: usize,
    pub k: usize,
    pub aux_k: usize,
    pub dead_threshold_rate: f64,
    pub dead_window: usize,
    pub aux_weight: f64,
    pub aux_start_step: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub end_factor: f64,
    pub batch_size: usize,
    /// Trailing fraction of each dump held out for early stopping.
    pub val_fraction: f64,
    pub eval_every: usize,
    /// Steps without validation improvement before stopping (`None` never stops).
    pub patience: Option<usize>,
    pub log_every: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for CrosscoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            features: 512,
            k: 16,
            aux_k: 64,
            dead_threshold_rate: 0.01,
            dead_window: 1000,
            aux_weight: 1.0 / 32.0,
            aux_start_step: 1000,
            lr: 3e-4,
            warmup_steps: 500,
            total_steps: 5000,
            end_factor: 0.0,
            batch_size: 64,
            val_fraction: 0.1,
            eval_every: 100,
            patience: Some(1500),
            log_every: 50,
            init_scale: 0.1,
            seed: 420,
        }
    }
}

impl CrosscoderConfig {
    pub fn validate(&self) -> Result<(), CrosscoderError> {
        let bad = |m: String| Err(CrosscoderError::Config(m));
        if self.d == 0 || self.features == 0 {
            return bad("d and features must be positive".into());
        }
        if self.k == 0 || self.k > self.features {
            return bad(format!("k = {} must lie in 1..={}", self.k, self.features));
        }
        if self.aux_k > self.features {
            return bad(format!("aux_k = {} exceeds features {}", self.aux_k, self.features));
        }
        if !(0.0..=1.0).contains(&self.dead_threshold_rate) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("dead_threshold_rate must lie in [0,1] and val_fraction in [0,1)".into());
        }
        if self.dead_window == 0 || self.batch_size == 0 || self.eval_every == 0 || self.log_every == 0 {
            return bad("dead_window, batch_size, eval_every, log_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.aux_weight >= 0.0) {
            return bad("lr must be positive and aux_weight non-negative".into());
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------------
// Parameters

/// Per-dimension z-score statistics, frozen after estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn estimate(rows: &Matrix<f64>) -> Self {
        let (n, d) = rows.shape();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(rows.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(rows.row(i)).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n.max(1) as f64).sqrt()).map(|s| if s > 1e-8 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderParams {
    /// `F × d`; row `f` is feature `f`'s encoder direction.
    pub w_enc: Matrix<f64>,
    pub b_enc: Vec<f64>,
    /// `F × d` decoder per domain.
    pub w_dec: [Matrix<f64>; 2],
    /// Decoder bias per domain, also subtracted before encoding.
    pub b_dec: [Vec<f64>; 2],
    pub norm: [Normalizer; 2],
    pub k: usize,
}

impl CrosscoderParams {
    /// Gaussian encoder with std `scale/√d`, decoders tied to the encoder
    /// transpose, zero biases.
    pub fn init(cfg: &CrosscoderConfig, norm: [Normalizer; 2]) -> Self {
        let mut rng = SeededRng::new(cfg.seed).derive(0);
        let s = cfg.init_scale / (cfg.d as f64).sqrt();
        let w_enc = Matrix::from_fn(cfg.features, cfg.d, |_, _| s * rng.gaussian());
        Self {
            w_dec: [w_enc.clone(), w_enc.clone()],
            w_enc,
            b_enc: vec![0.0; cfg.features],
            b_dec: [vec![0.0; cfg.d], vec![0.0; cfg.d]],
            norm,
            k: cfg.k,
        }
    }

    pub fn features(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_enc.cols()
    }

    fn pre_activations(&self, x: &[f64], domain: Domain) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.b_dec[domain.idx()]).map(|(x, b)| x - b).collect();
        (0..self.features())
            .map(|f| self.w_enc.row(f).iter().zip(&centered).map(|(w, c)| w * c).sum::<f64>() + self.b_enc[f])
            .collect()
    }

    /// Sparse latent of an already-normalized input.
    pub fn encode(&self, x: &[f64], domain: Domain) -> Vec<f64> {
        let pre = self.pre_activations(x, domain);
        let mut z = vec![0.0; pre.len()];
        for f in top_k_support(&pre, self.k, None) {
            z[f] = pre[f];
        }
        z
    }

    /// Normalizes a raw activation with the domain's statistics, then encodes.
    pub fn encode_raw(&self, x: &[f64], domain: Domain) -> Vec<f64> {
        self.encode(&self.norm[domain.idx()].apply(x), domain)
    }

    /// Reconstruction in normalized coordinates.
    pub fn decode(&self, z: &[f64], domain: Domain) -> Vec<f64> {
        let mut out = self.b_dec[domain.idx()].clone();
        accumulate_decode(&self.w_dec[domain.idx()], z, &mut out);
        out
    }
}

fn accumulate_decode(w_dec: &Matrix<f64>, z: &[f64], out: &mut [f64]) {
    for (f, &zf) in z.iter().enumerate() {
        if zf != 0.0 {
            for (o, w) in out.iter_mut().zip(w_dec.row(f)) {
                *o += zf * w;
            }
        }
    }
}

/// Indices of the `k` largest positive entries (ties to the lower index),
/// optionally restricted to `allowed`.
pub fn top_k_support(pre: &[f64], k: usize, allowed: Option<&[bool]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pre.len())
        .filter(|&f| pre[f] > 0.0 && allowed.map_or(true, |a| a[f]))
        .collect();
    let order = |a: &usize, b: &usize| pre[*b].total_cmp(&pre[*a]).then(a.cmp(b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

// ----------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderRecord {
    pub step: usize,
    pub loss: f64,
    pub mse_a: f64,
    pub mse_b: f64,
    pub aux: f64,
    /// Fraction of features firing below the dead threshold over the
    /// trailing window.
    pub dead_fraction: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderFit {
    pub params: CrosscoderParams,
    pub history: Vec<CrosscoderRecord>,
    /// Summed per-domain reconstruction MSE on the full training dumps.
    pub initial_mse: f64,
    pub final_mse: f64,
    /// `(step, validation MSE)` at every evaluation.
    pub validation: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

impl CrosscoderFit {
    pub fn final_dead_fraction(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.dead_fraction)
    }
}

/// Trailing-window firing counts.
struct FireWindow {
    window: usize,
    steps: VecDeque<(Vec<u32>, usize)>,
    fires: Vec<u64>,
    examples: u64,
}

impl FireWindow {
    fn new(features: usize, window: usize) -> Self {
        Self { window, steps: VecDeque::new(), fires: vec![0; features], examples: 0 }
    }

    fn push(&mut self, counts: Vec<u32>, examples: usize) {
        for (t, c) in self.fires.iter_mut().zip(&counts) {
            *t += *c as u64;
        }
        self.examples += examples as u64;
        self.steps.push_back((counts, examples));
        if self.steps.len() > self.window {
            let (old, n) = self.steps.pop_front().expect("non-empty");
            for (t, c) in self.fires.iter_mut().zip(&old) {
                *t -= *c as u64;
            }
            self.examples -= n as u64;
        }
    }

    fn dead(&self, threshold: f64) -> Vec<bool> {
        if self.examples == 0 {
            return vec![false; self.fires.len()];
        }
        self.fires.iter().map(|&c| (c as f64) / (self.examples as f64) < threshold).collect()
    }
}

struct Grads {
    w_enc: Matrix<f64>,
    b_enc: Vec<f64>,
    w_dec: [Matrix<f64>; 2],
    b_dec: [Vec<f64>; 2],
}

impl Grads {
    fn zeros(f: usize, d: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(f, d),
            b_enc: vec![0.0; f],
            w_dec: [Matrix::zeros(f, d), Matrix::zeros(f, d)],
            b_dec: [vec![0.0; d], vec![0.0; d]],
        }
    }
}

/// Backward through a sparse decode `out = Σ z_f W_f (+ b)` and the encoder
/// for the features in `support`.
#[allow(clippy::too_many_arguments)]
fn backprop_sparse(
    p: &CrosscoderParams,
    g: &mut Grads,
    dom: usize,
    centered: &[f64],
    z: &[(usize, f64)],
    dout: &[f64],
    with_bias: bool,
) {
    if with_bias {
        for (b, d) in g.b_dec[dom].iter_mut().zip(dout) {
            *b += d;
        }
    }
    for &(f, zf) in z {
        let wd = p.w_dec[dom].row(f);
        let dz: f64 = wd.iter().zip(dout).map(|(w, d)| w * d).sum();
        for (gw, d) in g.w_dec[dom].row_mut(f).iter_mut().zip(dout) {
            *gw += zf * d;
        }
        g.b_enc[f] += dz;
        for (gw, c) in g.w_enc.row_mut(f).iter_mut().zip(centered) {
            *gw += dz * c;
        }
        for (gb, we) in g.b_dec[dom].iter_mut().zip(p.w_enc.row(f)) {
            *gb -= dz * we;
        }
    }
}

fn normalized_rows(m: &Matrix<f64>, rows: std::ops::Range<usize>, norm: &Normalizer) -> Vec<Vec<f64>> {
    rows.map(|i| norm.apply(m.row(i))).collect()
}

/// Mean over rows and dimensions of the squared reconstruction error, summed
/// over both domains.
pub fn reconstruction_mse(params: &CrosscoderParams, data: [&[Vec<f64>]; 2]) -> f64 {
    Domain::BOTH
        .iter()
        .map(|&dom| {
            let rows = data[dom.idx()];
            let total: f64 = rows
                .iter()
                .map(|x| {
                    let r = params.decode(&params.encode(x, dom), dom);
                    r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            total / (rows.len().max(1) * params.dim()) as f64
        })
        .sum()
}

/// Trains on raw activation rows from both domains (`n_A × d`, `n_B × d`).
pub fn train(cfg: &CrosscoderConfig, a: &Matrix<f64>, b: &Matrix<f64>) -> Result<CrosscoderFit, CrosscoderError> {
    cfg.validate()?;
    for (dom, m) in Domain::BOTH.iter().zip([a, b]) {
        if m.rows() == 0 {
            return Err(CrosscoderError::EmptyDump(*dom));
        }
        if m.cols() != cfg.d {
            return Err(CrosscoderError::Dim { expected: cfg.d, got: m.cols() });
        }
    }
    let split = |m: &Matrix<f64>| {
        let val = (m.rows() as f64 * cfg.val_fraction).floor() as usize;
        if val == 0 || val == m.rows() {
            (m.rows(), 0)
        } else {
            (m.rows() - val, val)
        }
    };
    let (na, va) = split(a);
    let (nb, vb) = split(b);
    let norm = [Normalizer::estimate(&a.slice_rows(0, na)), Normalizer::estimate(&b.slice_rows(0, nb))];
    let train_rows = [normalized_rows(a, 0..na, &norm[0]), normalized_rows(b, 0..nb, &norm[1])];
    let val_rows = [normalized_rows(a, na..na + va, &norm[0]), normalized_rows(b, nb..nb + vb, &norm[1])];
    let has_val = va > 0 && vb > 0;

    let mut params = CrosscoderParams::init(cfg, norm);
    let initial_mse = reconstruction_mse(&params, [&train_rows[0], &train_rows[1]]);
    let schedule = Schedule {
        lr_max: cfg.lr,
        warmup_steps: cfg.warmup_steps.max(1),
        total_steps: cfg.total_steps,
        end_factor: cfg.end_factor,
    };
    let mut adam = Adam::<f64>::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let mut window = FireWindow::new(cfg.features, cfg.dead_window);
    let root = SeededRng::new(cfg.seed).derive(1);
    let (f_n, d) = (cfg.features, cfg.d);
    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, CrosscoderParams)> = None;
    let mut stopped_early = false;

    for step in 0..cfg.total_steps {
        let lr = schedule.lr(step);
        let aux_on = cfg.aux_weight > 0.0 && cfg.aux_k > 0 && step >= cfg.aux_start_step;
        let dead = window.dead(cfg.dead_threshold_rate);
        let mut grads = Grads::zeros(f_n, d);
        let mut counts = vec![0u32; f_n];
        let mut mse = [0.0; 2];
        let mut aux_total = 0.0;
        let mut examples = 0;
        for dom in Domain::BOTH {
            let di = dom.idx();
            let rows = &train_rows[di];
            let mut rng = root.derive(step as u64).derive(di as u64);
            let batch: Vec<usize> = if rows.len() >= cfg.batch_size {
                rng.sample_indices(rows.len(), cfg.batch_size)
            } else {
                (0..cfg.batch_size).map(|_| rng.below(rows.len())).collect()
            };
            let scale = 2.0 / (batch.len() * d) as f64;
            for &i in &batch {
                let x = &rows[i];
                let centered: Vec<f64> = x.iter().zip(&params.b_dec[di]).map(|(x, b)| x - b).collect();
                let pre = params.pre_activations(x, dom);
                let support: Vec<(usize, f64)> =
                    top_k_support(&pre, cfg.k, None).into_iter().map(|f| (f, pre[f])).collect();
                for &(f, _) in &support {
                    counts[f] += 1;
                }
                let mut recon = params.b_dec[di].clone();
                for &(f, zf) in &support {
                    for (o, w) in recon.iter_mut().zip(params.w_dec[di].row(f)) {
                        *o += zf * w;
                    }
                }
                let resid: Vec<f64> = x.iter().zip(&recon).map(|(x, r)| x - r).collect();
                mse[di] += resid.iter().map(|e| e * e).sum::<f64>() / (batch.len() * d) as f64;
                let dout: Vec<f64> = resid.iter().map(|e| -scale * e).collect();
                backprop_sparse(&params, &mut grads, di, &centered, &support, &dout, true);
                if aux_on {
                    let aux_support: Vec<(usize, f64)> =
                        top_k_support(&pre, cfg.aux_k, Some(&dead)).into_iter().map(|f| (f, pre[f])).collect();
                    if !aux_support.is_empty() {
                        let mut aux_recon = vec![0.0; d];
                        for &(f, zf) in &aux_support {
                            for (o, w) in aux_recon.iter_mut().zip(params.w_dec[di].row(f)) {
                                *o += zf * w;
                            }
                        }
                        let diff: Vec<f64> = aux_recon.iter().zip(&resid).map(|(a, e)| a - e).collect();
                        aux_total += diff.iter().map(|v| v * v).sum::<f64>() / (batch.len() * d) as f64;
                        let daux: Vec<f64> = diff.iter().map(|v| cfg.aux_weight * scale * v).collect();
                        backprop_sparse(&params, &mut grads, di, &centered, &aux_support, &daux, false);
                    }
                }
            }
            examples += batch.len();
        }
        let loss = mse[0] + mse[1] + cfg.aux_weight * aux_total;
        if !loss.is_finite() {
            return Err(CrosscoderError::NonFinite { step });
        }
        window.push(counts, examples);

        adam.begin_step();
        adam.update(0, params.w_enc.data_mut(), grads.w_enc.data(), lr, false);
        adam.update(1, &mut params.b_enc, &grads.b_enc, lr, false);
        for di in 0..2 {
            adam.update(2 + di, params.w_dec[di].data_mut(), grads.w_dec[di].data(), lr, false);
            adam.update(4 + di, &mut params.b_dec[di], &grads.b_dec[di], lr, false);
        }

        let last = step + 1 == cfg.total_steps;
        if step % cfg.log_every == 0 || last {
            let dead_now = window.dead(cfg.dead_threshold_rate);
            history.push(CrosscoderRecord {
                step,
                loss,
                mse_a: mse[0],
                mse_b: mse[1],
                aux: aux_total,
                dead_fraction: dead_now.iter().filter(|&&x| x).count() as f64 / f_n as f64,
                lr,
            });
        }
        if has_val && ((step + 1) % cfg.eval_every == 0 || last) {
            let v = reconstruction_mse(&params, [&val_rows[0], &val_rows[1]]);
            validation.push((step + 1, v));
            match &best {
                Some((bv, _, _)) if v >= *bv => {}
                _ => best = Some((v, step + 1, params.clone())),
            }
            if let (Some(p), Some((_, at, _))) = (cfg.patience, &best) {
                if step + 1 - at >= p && !last {
                    stopped_early = true;
                    let dead_now = window.dead(cfg.dead_threshold_rate);
                    history.push(CrosscoderRecord {
                        step,
                        loss,
                        mse_a: mse[0],
                        mse_b: mse[1],
                        aux: aux_total,
                        dead_fraction: dead_now.iter().filter(|&&x| x).count() as f64 / f_n as f64,
                        lr,
                    });
                    break;
                }
            }
        }
    }
    if let Some((_, _, p)) = best {
        params = p;
    }
    let final_mse = reconstruction_mse(&params, [&train_rows[0], &train_rows[1]]);
    Ok(CrosscoderFit { params, history, initial_mse, final_mse, validation, stopped_early })
}

// ----------------------------------------------------------------------------
// Analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLabel {
    AOnly,
    BOnly,
    AB,
    Dead,
}

impl FeatureLabel {
    pub fn name(self) -> &'static str {
        match self {
            FeatureLabel::AOnly => "a_only",
            FeatureLabel::BOnly => "b_only",
            FeatureLabel::AB => "a_b",
            FeatureLabel::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    pub label: FeatureLabel,
    /// `min(rate_a, rate_b)`.
    pub balance: f64,
    /// Row indices of the strongest activations, descending.
    pub top_a: Vec<usize>,
    pub top_b: Vec<usize>,
}

pub fn label_for(rate_a: f64, rate_b: f64, threshold: f64) -> FeatureLabel {
    match (rate_a >= threshold && rate_a > 0.0, rate_b >= threshold && rate_b > 0.0) {
        (true, true) => FeatureLabel::AB,
        (true, false) => FeatureLabel::AOnly,
        (false, true) => FeatureLabel::BOnly,
        (false, false) => FeatureLabel::Dead,
    }
}

/// Firing rate (fraction of rows with a non-zero latent) per feature and
/// domain, labels at `threshold`, and the `top_n` strongest rows per domain.
pub fn analyze(
    params: &CrosscoderParams,
    a: &Matrix<f64>,
    b: &Matrix<f64>,
    threshold: f64,
    top_n: usize,
) -> Result<Vec<FeatureStats>, CrosscoderError> {
    let f_n = params.features();
    let mut rates = [vec![0.0; f_n], vec![0.0; f_n]];
    let mut tops: [Vec<Vec<(f64, usize)>>; 2] = [vec![Vec::new(); f_n], vec![Vec::new(); f_n]];
    for (dom, m) in Domain::BOTH.iter().zip([a, b]) {
        if m.rows() == 0 {
            return Err(CrosscoderError::EmptyDump(*dom));
        }
        if m.cols() != params.dim() {
            return Err(CrosscoderError::Dim { expected: params.dim(), got: m.cols() });
        }
        let di = dom.idx();
        for i in 0..m.rows() {
            let z = params.encode_raw(m.row(i), *dom);
            for (f, &v) in z.iter().enumerate() {
                if v > 0.0 {
                    rates[di][f] += 1.0;
                    let t = &mut tops[di][f];
                    t.push((v, i));
                    if t.len() > top_n {
                        t.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                        t.truncate(top_n);
                    }
                }
            }
        }
        rates[di].iter_mut().for_each(|r| *r /= m.rows() as f64);
    }
    Ok((0..f_n)
        .map(|f| {
            let top = |di: usize| {
                let mut t = tops[di][f].clone();
                t.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                t.into_iter().take(top_n).map(|(_, i)| i).collect()
            };
            let (ra, rb) = (rates[0][f], rates[1][f]);
            FeatureStats {
                feature: f,
                rate_a: ra,
                rate_b: rb,
                label: label_for(ra, rb, threshold),
                balance: ra.min(rb),
                top_a: top(0),
                top_b: top(1),
            }
        })
        .collect())
}

/// Cross-domain features ordered by balance, descending.
pub fn rank_cross_domain(stats: &[FeatureStats]) -> Vec<&FeatureStats> {
    let mut v: Vec<&FeatureStats> = stats.iter().filter(|s| s.label == FeatureLabel::AB).collect();
    v.sort_by(|x, y| y.balance.total_cmp(&x.balance).then(x.feature.cmp(&y.feature)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(pre_bias: Vec<f64>, k: usize) -> CrosscoderParams {
        let f = pre_bias.len();
        let norm = Normalizer { mean: vec![0.0; 1], std: vec![1.0; 1] };
        CrosscoderParams {
            w_enc: Matrix::zeros(f, 1),
            b_enc: pre_bias,
            w_dec: [Matrix::zeros(f, 1), Matrix::zeros(f, 1)],
            b_dec: [vec![0.0], vec![0.0]],
            norm: [norm.clone(), norm],
            k,
        }
    }

    #[test]
    fn top_k_definition() {
        let p = identity_params(vec![3.0, 1.0, 2.0], 2);
        assert_eq!(p.encode(&[0.0], Domain::A), vec![3.0, 0.0, 2.0]);
        let dense = identity_params(vec![3.0, -1.0, 2.0], 3);
        assert_eq!(dense.encode(&[0.0], Domain::B), vec![3.0, 0.0, 2.0]);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_support(&[1.0, 2.0, 2.0, 2.0], 2, None), vec![1, 2]);
        assert_eq!(top_k_support(&[1.0, 2.0, 3.0], 2, Some(&[true, true, false])), vec![0, 1]);
    }

    #[test]
    fn labels_partition() {
        assert_eq!(label_for(0.0, 0.0, 0.01), FeatureLabel::Dead);
        assert_eq!(label_for(0.5, 0.005, 0.01), FeatureLabel::AOnly);
        assert_eq!(label_for(0.005, 0.5, 0.01), FeatureLabel::BOnly);
        assert_eq!(label_for(0.504, 0.418, 0.01), FeatureLabel::AB);
    }

    #[test]
    fn fire_window_evicts() {
        let mut w = FireWindow::new(2, 2);
        w.push(vec![1, 0], 10);
        w.push(vec![0, 0], 10);
        assert_eq!(w.dead(0.01), vec![false, true]);
        w.push(vec![0, 1], 10);
        assert_eq!(w.dead(0.01), vec![true, false]);
    }

    #[test]
    fn config_bounds() {
        assert!(CrosscoderConfig::default().validate().is_ok());
        let bad = CrosscoderConfig { k: 600, ..CrosscoderConfig::default() };
        assert!(bad.validate().is_err());
    }
}
