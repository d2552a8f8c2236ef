//! Point and probabilistic forecast metrics, macro aggregation, and the
//! effective-data-transfer inversion of loss curves.
//!
//! Positions with NaN truth are removed before any metric is computed, so lag
//! pairs for MASE are formed on the remaining sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecaster::QuantileForecast;

/// Added to MAPE and sMAPE denominators.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("forecast and truth lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("every truth value is NaN")]
    AllNan,
    #[error("no records to aggregate")]
    Empty,
    #[error("loss curve: {0}")]
    Curve(String),
    #[error("loss level {level} is never reached by the {which} curve")]
    Unreached { level: f64, which: &'static str },
}

pub const METRIC_NAMES: [&str; 12] = [
    "crps", "mse", "mae", "mase", "rmse", "nrmse", "nd", "mape", "smape", "wmape", "da", "pearson",
];

/// Per-sequence metric values; `None` marks an undefined value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub crps: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub mase: Option<f64>,
    pub rmse: Option<f64>,
    pub nrmse: Option<f64>,
    pub nd: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub wmape: Option<f64>,
    pub da: Option<f64>,
    pub pearson: Option<f64>,
}

impl EvalRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "crps" => self.crps,
            "mse" => self.mse,
            "mae" => self.mae,
            "mase" => self.mase,
            "rmse" => self.rmse,
            "nrmse" => self.nrmse,
            "nd" => self.nd,
            "mape" => self.mape,
            "smape" => self.smape,
            "wmape" => self.wmape,
            "da" => self.da,
            "pearson" => self.pearson,
            _ => None,
        }
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn valid_pairs(yhat: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if yhat.len() != y.len() {
        return Err(MetricsError::Length(yhat.len(), y.len()));
    }
    let (p, t): (Vec<f64>, Vec<f64>) =
        yhat.iter().zip(y).filter(|(_, t)| !t.is_nan()).map(|(&a, &b)| (a, b)).unzip();
    if t.is_empty() {
        return Err(MetricsError::AllNan);
    }
    Ok((p, t))
}

fn nonzero(x: f64) -> Option<f64> {
    (x != 0.0).then_some(x)
}

/// Point metrics of the median forecast `yhat` against `y`, with seasonality
/// `m` for MASE and anchor `y0` for directional accuracy.
pub fn point_metrics(yhat: &[f64], y: &[f64], m: usize, y0: f64) -> Result<EvalRecord, MetricsError> {
    let (p, t) = valid_pairs(yhat, y)?;
    let h = t.len() as f64;
    let err: Vec<f64> = p.iter().zip(&t).map(|(a, b)| b - a).collect();
    let mse = err.iter().map(|e| e * e).sum::<f64>() / h;
    let abs_sum: f64 = err.iter().map(|e| e.abs()).sum();
    let mae = abs_sum / h;
    let y_abs: f64 = t.iter().map(|v| v.abs()).sum();

    let mase = if m >= 1 && t.len() > m {
        let naive = (m..t.len()).map(|i| (t[i] - t[i - m]).abs()).sum::<f64>() / (t.len() - m) as f64;
        nonzero(naive).map(|d| mae / d)
    } else {
        None
    };
    let mape = 100.0 / h * err.iter().zip(&t).map(|(e, y)| e.abs() / (y.abs() + EPS)).sum::<f64>();
    let smape = 200.0 / h
        * err.iter().zip(&t).zip(&p).map(|((e, y), a)| e.abs() / (y.abs() + a.abs() + EPS)).sum::<f64>();
    let da = p.iter().zip(&t).filter(|(a, b)| sign(*a - y0) == sign(*b - y0)).count() as f64 / h;

    Ok(EvalRecord {
        crps: None,
        mse: Some(mse),
        mae: Some(mae),
        mase,
        rmse: Some(mse.sqrt()),
        nrmse: nonzero(y_abs / h).map(|d| mse.sqrt() / d),
        nd: nonzero(y_abs).map(|d| abs_sum / d),
        mape: Some(mape),
        smape: Some(smape),
        wmape: None,
        da: Some(da),
        pearson: pearson(&p, &t),
    })
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa.sqrt() * sbb.sqrt()))
}

/// `QL_q(y, ŷ) = (q − 1[y ≤ ŷ])·(y − ŷ)`.
pub fn ql(q: f64, y: f64, yhat: f64) -> f64 {
    (q - if y <= yhat { 1.0 } else { 0.0 }) * (y - yhat)
}

/// Trapezoidal weights `w_q = (τ_{q+1} − τ_{q−1}) / 2` with `τ_0 = 0` and
/// `τ_{Q+1} = 1`.
pub fn crps_weights(levels: &[f64]) -> Vec<f64> {
    let n = levels.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { levels[i - 1] };
            let hi = if i + 1 == n { 1.0 } else { levels[i + 1] };
            (hi - lo) / 2.0
        })
        .collect()
}

/// Per-level quantile loss averaged over the valid horizon.
fn level_losses(values: &[Vec<f64>], levels: &[f64], y: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if values.len() != y.len() {
        return Err(MetricsError::Length(values.len(), y.len()));
    }
    let valid: Vec<usize> = (0..y.len()).filter(|&t| !y[t].is_nan()).collect();
    if valid.is_empty() {
        return Err(MetricsError::AllNan);
    }
    Ok(levels
        .iter()
        .enumerate()
        .map(|(q, &tau)| valid.iter().map(|&t| ql(tau, y[t], values[t][q])).sum::<f64>() / valid.len() as f64)
        .collect())
}

/// `2 Σ_q w_q · QL_q` with horizon-averaged `QL_q`, on quantile rows `values`.
pub fn crps_from_quantiles(values: &[Vec<f64>], levels: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let losses = level_losses(values, levels, y)?;
    Ok(2.0 * crps_weights(levels).iter().zip(&losses).map(|(w, l)| w * l).sum::<f64>())
}

pub fn crps_approx(forecast: &QuantileForecast, y: &[f64]) -> Result<f64, MetricsError> {
    crps_from_quantiles(&forecast.denormalized(), &forecast.levels, y)
}

/// `(1/Q) Σ_q Σ_t QL_q / Σ_t |y_t|`; `None` when the truth is all zero.
pub fn wmape_from_quantiles(
    values: &[Vec<f64>],
    levels: &[f64],
    y: &[f64],
) -> Result<Option<f64>, MetricsError> {
    let losses = level_losses(values, levels, y)?;
    let valid: Vec<f64> = y.iter().copied().filter(|v| !v.is_nan()).collect();
    let n = valid.len() as f64;
    let denom: f64 = valid.iter().map(|v| v.abs()).sum();
    // level_losses are horizon means; rescale to sums.
    Ok(nonzero(denom).map(|d| losses.iter().map(|l| l * n / d).sum::<f64>() / levels.len() as f64))
}

pub fn wmape_quantile(forecast: &QuantileForecast, y: &[f64]) -> Result<Option<f64>, MetricsError> {
    wmape_from_quantiles(&forecast.denormalized(), &forecast.levels, y)
}

/// Every metric for one sequence; point metrics use the median.
pub fn evaluate_forecast(
    forecast: &QuantileForecast,
    y: &[f64],
    m: usize,
    y0: f64,
) -> Result<EvalRecord, MetricsError> {
    let mut rec = point_metrics(&forecast.median(), y, m, y0)?;
    rec.crps = Some(crps_approx(forecast, y)?);
    rec.wmape = wmape_quantile(forecast, y)?;
    Ok(rec)
}

// ----------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    /// Mean over sequences where the metric is defined.
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<MetricSummary>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(METRIC_NAMES
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.get(name)).collect();
            MetricSummary {
                name: name.to_string(),
                mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                defined: vals.len(),
                undefined: records.len() - vals.len(),
            }
        })
        .collect())
}

// ----------------------------------------------------------------------------
// Effective transfer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<f64>,
    pub losses: Vec<f64>,
    pub label: String,
}

impl LossCurve {
    pub fn new(steps: Vec<f64>, losses: Vec<f64>, label: impl Into<String>) -> Result<Self, MetricsError> {
        if steps.len() != losses.len() || steps.is_empty() {
            return Err(MetricsError::Curve("steps and losses must be non-empty and equal length".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::Curve("steps must be strictly increasing".into()));
        }
        Ok(Self { steps, losses, label: label.into() })
    }

    /// Steps needed to reach `level`, on the running minimum of the curve.
    ///
    /// Between samples the curve is interpolated linearly in (log step, log
    /// loss), which inverts power laws exactly; segments touching step 0 or a
    /// non-positive loss fall back to linear interpolation.
    pub fn inverse(&self, level: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        let mut prev: Option<(f64, f64)> = None;
        for (&s, &l) in self.steps.iter().zip(&self.losses) {
            let cur = best.min(l);
            if cur <= level {
                let Some((s0, l0)) = prev else { return Some(s) };
                if l0 == cur {
                    return Some(s0);
                }
                let log_ok = s0 > 0.0 && cur > 0.0 && level > 0.0;
                return Some(if log_ok {
                    let f = (l0.ln() - level.ln()) / (l0.ln() - cur.ln());
                    (s0.ln() + f * (s.ln() - s0.ln())).exp()
                } else {
                    let f = (l0 - level) / (l0 - cur);
                    s0 + f * (s - s0)
                });
            }
            best = cur;
            prev = Some((s, cur));
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEstimate {
    pub level: f64,
    pub steps_random: f64,
    pub steps_pretrained: f64,
    /// `L_R⁻¹(ℓ) − L_P⁻¹(ℓ)`.
    pub difference: f64,
    /// `L_R⁻¹(ℓ) / L_P⁻¹(ℓ)`.
    pub ratio: f64,
}

pub fn effective_transfer(
    random: &LossCurve,
    pretrained: &LossCurve,
    level: f64,
) -> Result<TransferEstimate, MetricsError> {
    let r = random.inverse(level).ok_or(MetricsError::Unreached { level, which: "random" })?;
    let p = pretrained.inverse(level).ok_or(MetricsError::Unreached { level, which: "pretrained" })?;
    Ok(TransferEstimate { level, steps_random: r, steps_pretrained: p, difference: r - p, ratio: r / p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast() {
        let y = [1.0, -2.0, 3.5];
        let r = point_metrics(&y, &y, 1, 0.5).unwrap();
        assert_eq!(r.mse, Some(0.0));
        assert_eq!(r.mae, Some(0.0));
        assert_eq!(r.mape, Some(0.0));
        assert_eq!(r.smape, Some(0.0));
        assert_eq!(r.da, Some(1.0));
    }

    #[test]
    fn hand_case() {
        let r = point_metrics(&[1.0, 3.0, 3.0], &[1.0, 2.0, 4.0], 1, 1.0).unwrap();
        assert!((r.mae.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mase.unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(r.da, Some(1.0));
    }

    #[test]
    fn naive_forecast_has_unit_mase() {
        // y_t = 2t + 1; the naive forecast is the previous value, y_0 = 1 for t = 1.
        let y = [3.0, 5.0, 7.0, 9.0, 11.0];
        let naive = [1.0, 3.0, 5.0, 7.0, 9.0];
        assert_eq!(point_metrics(&naive, &y, 1, 1.0).unwrap().mase, Some(1.0));
    }

    #[test]
    fn undefined_fields() {
        let r = point_metrics(&[1.0, 1.0], &[0.0, 0.0], 1, 0.0).unwrap();
        assert_eq!(r.nrmse, None);
        assert_eq!(r.nd, None);
        assert_eq!(r.mase, None);
        assert_eq!(r.pearson, None);
        let r = point_metrics(&[1.0], &[2.0], 1, 0.0).unwrap();
        assert_eq!(r.mase, None);
        assert!(point_metrics(&[1.0], &[f64::NAN], 1, 0.0).is_err());
    }

    #[test]
    fn crps_and_wmape_examples() {
        assert_eq!(crps_weights(&[0.5]), vec![0.5]);
        let w = crps_weights(&(1..=9).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
        assert!(w.iter().all(|&x| (x - 0.1).abs() < 1e-15));
        // 2·w·QL = 2·0.5·(0.5·2) = 1.
        assert_eq!(crps_from_quantiles(&[vec![0.0]], &[0.5], &[2.0]).unwrap(), 1.0);
        assert_eq!(crps_from_quantiles(&[vec![2.0; 3]], &[0.1, 0.5, 0.9], &[2.0]).unwrap(), 0.0);
        assert_eq!(wmape_from_quantiles(&[vec![2.0]], &[0.5], &[4.0]).unwrap(), Some(0.25));
        assert_eq!(wmape_from_quantiles(&[vec![2.0]], &[0.5], &[0.0]).unwrap(), None);
    }

    #[test]
    fn aggregate_masks_undefined() {
        let rec = |mse, mase| EvalRecord { mse: Some(mse), mase, ..Default::default() };
        let s = aggregate(&[rec(1.0, Some(2.0)), rec(3.0, None), rec(2.0, Some(4.0))]).unwrap();
        let get = |n: &str| s.iter().find(|m| m.name == n).unwrap().clone();
        assert_eq!(get("mse").mean, Some(2.0));
        assert_eq!(get("mase").mean, Some(3.0));
        assert_eq!(get("mase").undefined, 1);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn transfer_power_law() {
        let steps: Vec<f64> = (0..8).map(|k| 2f64.powi(k)).collect();
        let r = LossCurve::new(steps.clone(), steps.iter().map(|d| 1.0 / d).collect(), "r").unwrap();
        let p = LossCurve::new(steps.clone(), steps.iter().map(|d| 1.0 / (3.0 * d)).collect(), "p").unwrap();
        let est = effective_transfer(&r, &p, 0.1).unwrap();
        assert!((est.steps_random - 10.0).abs() < 1e-9);
        assert!((est.steps_pretrained - 10.0 / 3.0).abs() < 1e-9);
        assert!((est.difference - 20.0 / 3.0).abs() < 1e-9);
        assert!((est.ratio - 3.0).abs() < 1e-9);
        let same = effective_transfer(&r, &r, 0.1).unwrap();
        assert_eq!((same.difference, same.ratio), (0.0, 1.0));
        assert!(effective_transfer(&r, &p, 1e-6).is_err());
    }

    #[test]
    fn running_minimum_smooths_noise() {
        let c = LossCurve::new(vec![1.0, 2.0, 4.0, 8.0], vec![1.0, 0.5, 0.9, 0.25], "c").unwrap();
        let v = c.inverse(0.4).unwrap();
        assert!(v > 4.0 && v < 8.0);
    }
}
