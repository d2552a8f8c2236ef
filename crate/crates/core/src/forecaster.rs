//! Categorical-over-bins forecasts: temperature softmax, piecewise-linear CDF
//! inversion into quantiles, the pinball loss with its gradient, and
//! autoregressive rollout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AblationMask, Model, ModelError};
use crate::scalar::Scalar;
use crate::tokenizer::{normalize, BinTokenizerConfig, TokenizerError};

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("invalid quantile grid: {0}")]
    Grid(String),
    #[error("every target is NaN")]
    AllNanTargets,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ascending quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl Default for QuantileGrid {
    fn default() -> Self {
        Self { levels: (1..=9).map(|i| i as f64 / 10.0).collect() }
    }
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self, ForecastError> {
        if levels.is_empty() {
            return Err(ForecastError::Grid("no levels".into()));
        }
        if levels.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(ForecastError::Grid("levels must lie in (0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ForecastError::Grid("levels must be strictly ascending".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the 0.5 level, or of the level closest to it.
    pub fn median_index(&self) -> usize {
        let mut best = 0;
        for (i, &t) in self.levels.iter().enumerate() {
            if (t - 0.5).abs() < (self.levels[best] - 0.5).abs() {
                best = i;
            }
        }
        best
    }
}

/// Pinball loss `ρ_τ(u) = u·(τ − 1[u < 0])`.
pub fn pinball(u: f64, tau: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// Probabilities over bins: `softmax(logits / t_soft)` in 64 bits.
pub fn logits_to_categorical<S: Scalar>(logits: &[S], t_soft: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / t_soft).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// A quantile read off the piecewise-linear CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfQuantile {
    pub value: f64,
    /// Bin containing the quantile.
    pub bin: usize,
    /// Probability mass below `bin`.
    pub mass_below: f64,
    /// True when τ fell outside every mass-bearing bin and the value was
    /// snapped to an edge.
    pub snapped: bool,
}

/// Inverts the CDF that rises linearly across each bin.
pub fn quantile_from_cdf(probs: &[f64], tok: &BinTokenizerConfig, tau: f64) -> CdfQuantile {
    let w = tok.bin_width();
    let mut cum = 0.0;
    let mut last_mass = None;
    for (b, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if tau <= cum + p {
                let frac = ((tau - cum) / p).clamp(0.0, 1.0);
                return CdfQuantile {
                    value: tok.left_edge(b) + w * frac,
                    bin: b,
                    mass_below: cum,
                    snapped: false,
                };
            }
            last_mass = Some((b, cum));
        }
        cum += p;
    }
    // Rounding left the total mass just below τ.
    let (b, below) = last_mass.unwrap_or((probs.len() - 1, 0.0));
    CdfQuantile { value: tok.left_edge(b) + w, bin: b, mass_below: below, snapped: true }
}

/// Quantile forecaster settings shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub tokenizer: BinTokenizerConfig,
    pub quantiles: QuantileGrid,
    pub temperature: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            tokenizer: BinTokenizerConfig::default(),
            quantiles: QuantileGrid::default(),
            temperature: 1e-2,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        self.tokenizer.validate()?;
        QuantileGrid::new(self.quantiles.levels.clone())?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ForecastError::Temperature(self.temperature));
        }
        Ok(())
    }

    fn bins<'a, S: Scalar>(&self, logits_row: &'a [S]) -> &'a [S] {
        &logits_row[..self.tokenizer.vocab_size]
    }

    /// Quantile values (normalized space) from one logit row.
    pub fn quantiles<S: Scalar>(&self, logits_row: &[S]) -> Vec<f64> {
        let p = logits_to_categorical(self.bins(logits_row), self.temperature);
        self.quantiles
            .levels
            .iter()
            .map(|&t| quantile_from_cdf(&p, &self.tokenizer, t).value)
            .collect()
    }

    /// Mean pinball loss over the grid for one target, and its gradient with
    /// respect to the full logit row (non-bin logits get zero gradient).
    pub fn loss_and_grad<S: Scalar>(&self, logits_row: &[S], y: f64) -> (f64, Vec<f64>) {
        let v = self.tokenizer.vocab_size;
        let w = self.tokenizer.bin_width();
        let p = logits_to_categorical(self.bins(logits_row), self.temperature);
        let q = self.quantiles.levels.len() as f64;
        let mut loss = 0.0;
        // ∂L/∂p accumulated over levels.
        let mut dp = vec![0.0; v];
        for &tau in &self.quantiles.levels {
            let cq = quantile_from_cdf(&p, &self.tokenizer, tau);
            let u = y - cq.value;
            loss += pinball(u, tau) / q;
            if cq.snapped {
                continue;
            }
            // ∂ρ/∂q̂ = −(τ − 1[u<0]).
            let dq = -(tau - if u < 0.0 { 1.0 } else { 0.0 }) / q;
            let pb = p[cq.bin];
            for slot in dp.iter_mut().take(cq.bin) {
                *slot += dq * (-w / pb);
            }
            dp[cq.bin] += dq * (-w * (tau - cq.mass_below) / (pb * pb));
        }
        // Softmax chain with the 1/T factor.
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let mut grad = vec![0.0; logits_row.len()];
        for i in 0..v {
            grad[i] = p[i] * (dp[i] - mean) / self.temperature;
        }
        (loss, grad)
    }
}

/// Mean pinball loss over valid steps and levels; NaN targets are skipped.
pub fn quantile_loss(
    forecast: &[Vec<f64>],
    targets: &[f64],
    grid: &QuantileGrid,
) -> Result<f64, ForecastError> {
    assert_eq!(forecast.len(), targets.len(), "forecast/target length");
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &y) in forecast.iter().zip(targets) {
        if y.is_nan() {
            continue;
        }
        for (&qhat, &tau) in row.iter().zip(&grid.levels) {
            total += pinball(y - qhat, tau);
            n += 1;
        }
    }
    if n == 0 {
        return Err(ForecastError::AllNanTargets);
    }
    Ok(total / n as f64)
}

// ----------------------------------------------------------------------------
// Forecasts

/// `H × |levels|` quantile values in normalized space plus the affine map back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

impl QuantileForecast {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn denormalized(&self) -> Vec<Vec<f64>> {
        let s = self.std.max(crate::tokenizer::STD_FLOOR);
        self.values.iter().map(|r| r.iter().map(|v| v * s + self.mean).collect()).collect()
    }

    /// Denormalized values at the level nearest 0.5.
    pub fn median(&self) -> Vec<f64> {
        let grid = QuantileGrid { levels: self.levels.clone() };
        let m = grid.median_index();
        self.denormalized().iter().map(|r| r[m]).collect()
    }

    pub fn is_non_crossing(&self) -> bool {
        self.values.iter().all(|r| r.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Autoregressive rollout with median feedback.
pub fn rollout<S: Scalar>(
    model: &Model<S>,
    cfg: &ForecastConfig,
    context: &[f64],
    horizon: usize,
) -> Result<QuantileForecast, ForecastError> {
    if horizon == 0 {
        return Err(ForecastError::Horizon);
    }
    let norm = normalize(context)?;
    let mut tokens = cfg.tokenizer.tokenize(&norm.values).ids;
    let max = model.config.max_positions;
    let mid = cfg.quantiles.median_index();
    let mut values = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let start = tokens.len().saturating_sub(max);
        let window = &tokens[start..];
        let out = model.forward(window, &AblationMask::none(), false)?;
        let q = cfg.quantiles(out.logits.row(window.len() - 1));
        tokens.push(cfg.tokenizer.token(q[mid]));
        values.push(q);
    }
    Ok(QuantileForecast {
        levels: cfg.quantiles.levels.clone(),
        values,
        mean: norm.mean,
        std: norm.std,
    })
}

/// One-step-ahead quantiles for every target step given the true prefix
/// (context plus earlier targets), normalized with the context statistics.
pub fn teacher_forced<S: Scalar>(
    model: &Model<S>,
    cfg: &ForecastConfig,
    context: &[f64],
    target: &[f64],
) -> Result<QuantileForecast, ForecastError> {
    if target.is_empty() {
        return Err(ForecastError::Horizon);
    }
    let norm = normalize(context)?;
    let mut values = norm.values;
    values.extend(crate::tokenizer::apply_stats(&target[..target.len() - 1], norm.mean, norm.std));
    let tokens = cfg.tokenizer.tokenize(&values).ids;
    let out = model.forward(&tokens, &AblationMask::none(), false)?;
    let c = context.len();
    let values = (0..target.len()).map(|h| cfg.quantiles(out.logits.row(c - 1 + h))).collect();
    Ok(QuantileForecast {
        levels: cfg.quantiles.levels.clone(),
        values,
        mean: norm.mean,
        std: norm.std,
    })
}

/// Flat forecast at the last finite context value, for every level.
pub fn last_value_baseline(
    context: &[f64],
    horizon: usize,
    grid: &QuantileGrid,
) -> Result<QuantileForecast, ForecastError> {
    let last = context.iter().rev().find(|v| !v.is_nan()).ok_or(TokenizerError::AllNan)?;
    Ok(QuantileForecast {
        levels: grid.levels.clone(),
        values: vec![vec![0.0; grid.len()]; horizon],
        mean: *last,
        std: 1.0,
    })
}
