//! Synthetic waveforms, sliding windows, the z-scored series bank, and the
//! structured toy token corpus used as a stand-in for language pretraining.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SeededRng;
use crate::tokenizer::{context_stats, TokenSequence, STD_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum DatagenError {
    #[error("invalid waveform spec: {0}")]
    InvalidSpec(String),
    #[error("bank spec {index} ({kind:?}) produces a constant window")]
    ConstantWindow { index: usize, kind: WaveformKind },
    #[error("invalid corpus spec: {0}")]
    InvalidCorpus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    Sine,
    Square,
    Sawtooth,
    Seasonal,
    DampedSine,
    TwoFrequency,
    TrendOscillation,
    WhiteNoise,
    Constant,
    LinearTrend,
    RandomWalk,
}

impl WaveformKind {
    pub const ALL: [WaveformKind; 11] = [
        Self::Sine,
        Self::Square,
        Self::Sawtooth,
        Self::Seasonal,
        Self::DampedSine,
        Self::TwoFrequency,
        Self::TrendOscillation,
        Self::WhiteNoise,
        Self::Constant,
        Self::LinearTrend,
        Self::RandomWalk,
    ];
    /// Periodic families of the ablation sweep.
    pub const PERIODIC: [WaveformKind; 5] =
        [Self::Sine, Self::Square, Self::Sawtooth, Self::Seasonal, Self::DampedSine];
    /// Non-periodic control families of the ablation sweep.
    pub const CONTROL: [WaveformKind; 4] =
        [Self::WhiteNoise, Self::Constant, Self::LinearTrend, Self::RandomWalk];
    /// Inputs used for trajectory and coherence plots.
    pub const PROBE_INPUTS: [WaveformKind; 5] =
        [Self::Sine, Self::Square, Self::Sawtooth, Self::TwoFrequency, Self::TrendOscillation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sine => "sine",
            Self::Square => "square",
            Self::Sawtooth => "sawtooth",
            Self::Seasonal => "seasonal",
            Self::DampedSine => "damped_sine",
            Self::TwoFrequency => "two_frequency",
            Self::TrendOscillation => "trend_oscillation",
            Self::WhiteNoise => "white_noise",
            Self::Constant => "constant",
            Self::LinearTrend => "linear_trend",
            Self::RandomWalk => "random_walk",
        }
    }

    /// Period that the length/validity rules apply to, if the kind is periodic.
    pub fn effective_period(self, period: usize) -> Option<usize> {
        match self {
            Self::Sine | Self::Square | Self::Sawtooth | Self::Seasonal | Self::DampedSine => {
                Some(period)
            }
            Self::TwoFrequency => Some(TWO_FREQ_PERIODS.0),
            Self::TrendOscillation => Some(TREND_OSC_PERIOD),
            _ => None,
        }
    }
}

const TWO_FREQ_PERIODS: (usize, usize) = (64, 17);
const TREND_OSC_PERIOD: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    pub period: usize,
    pub length: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Total rise of the trend component over the series (slope `trend / T`).
    pub trend: f64,
    /// Draw a uniform phase offset for the oscillating kinds.
    pub random_phase: bool,
    /// Z-score then clip to `[-clip, clip]`.
    pub normalize: bool,
    pub clip: f64,
    /// Probability that a position is replaced by NaN (after normalization).
    pub nan_rate: f64,
    pub seed: u64,
}

impl Default for WaveformSpec {
    fn default() -> Self {
        Self {
            kind: WaveformKind::Sine,
            period: 64,
            length: 512,
            amplitude: 1.0,
            noise_std: 0.0,
            trend: 1.0,
            random_phase: false,
            normalize: false,
            clip: 5.0,
            nan_rate: 0.0,
            seed: 0,
        }
    }
}

impl WaveformSpec {
    pub fn new(kind: WaveformKind, period: usize, length: usize, seed: u64) -> Self {
        Self { kind, period, length, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.length < 2 {
            return bad(format!("length {} < 2", self.length));
        }
        if let Some(p) = self.kind.effective_period(self.period) {
            if p < 2 {
                return bad(format!("period {p} < 2"));
            }
            if self.length < 2 * p {
                return bad(format!("{}: length {} < 2 x period {p}", self.kind.name(), self.length));
            }
        }
        for (name, v) in [("amplitude", self.amplitude), ("trend", self.trend), ("clip", self.clip)] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.nan_rate) {
            return bad(format!("nan_rate {} outside [0, 1]", self.nan_rate));
        }
        if self.normalize && self.clip <= 0.0 {
            return bad(format!("clip {} must be positive", self.clip));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------------
// Waveforms

// Independent sub-streams of a spec's seed.
const STREAM_SHAPE: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_PHASE: u64 = 2;
const STREAM_NAN: u64 = 3;

pub fn generate_waveform(spec: &WaveformSpec) -> Result<Vec<f64>, DatagenError> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let n = spec.length;
    let tf = n as f64;
    let a = spec.amplitude;
    let p = spec.period as f64;
    let phase = if spec.random_phase { root.derive(STREAM_PHASE).uniform() * TAU } else { 0.0 };
    // Phase as a position offset for the piecewise kinds.
    let shift = phase / TAU * p;

    let mut x: Vec<f64> = match spec.kind {
        WaveformKind::Sine => (0..n).map(|t| a * (TAU * t as f64 / p + phase).sin()).collect(),
        WaveformKind::Square => (0..n)
            .map(|t| if (t as f64 + shift).rem_euclid(p) < p / 2.0 { a } else { -a })
            .collect(),
        WaveformKind::Sawtooth => (0..n)
            .map(|t| a * (2.0 * (t as f64 + shift).rem_euclid(p) / p - 1.0))
            .collect(),
        WaveformKind::Seasonal => (0..n)
            .map(|t| spec.trend * t as f64 / tf + a * (TAU * t as f64 / p + phase).sin())
            .collect(),
        WaveformKind::DampedSine => {
            let tau = tf / 2.0;
            (0..n)
                .map(|t| a * (-(t as f64) / tau).exp() * (TAU * t as f64 / p + phase).sin())
                .collect()
        }
        WaveformKind::TwoFrequency => {
            let (p1, p2) = (TWO_FREQ_PERIODS.0 as f64, TWO_FREQ_PERIODS.1 as f64);
            (0..n)
                .map(|t| {
                    let t = t as f64;
                    a * ((TAU * t / p1 + phase).sin() + 0.5 * (TAU * t / p2).sin())
                })
                .collect()
        }
        WaveformKind::TrendOscillation => {
            let p = TREND_OSC_PERIOD as f64;
            (0..n)
                .map(|t| {
                    let t = t as f64;
                    a * (t / tf + 0.3 * (TAU * t / p + phase).sin())
                })
                .collect()
        }
        WaveformKind::WhiteNoise => {
            let mut rng = root.derive(STREAM_SHAPE);
            (0..n).map(|_| a * rng.gaussian()).collect()
        }
        WaveformKind::Constant => vec![a; n],
        WaveformKind::LinearTrend => (0..n).map(|t| a * spec.trend * t as f64 / tf).collect(),
        WaveformKind::RandomWalk => {
            let mut rng = root.derive(STREAM_SHAPE);
            let mut level = 0.0;
            (0..n)
                .map(|t| {
                    if t > 0 {
                        level += a * rng.gaussian();
                    }
                    level
                })
                .collect()
        }
    };

    if spec.noise_std > 0.0 {
        let mut rng = root.derive(STREAM_NOISE);
        for v in x.iter_mut() {
            *v += spec.noise_std * rng.gaussian();
        }
    }
    if spec.normalize {
        let (mean, std) = context_stats(&x).expect("waveforms have no NaN before injection");
        let s = std.max(STD_FLOOR);
        for v in x.iter_mut() {
            *v = ((*v - mean) / s).clamp(-spec.clip, spec.clip);
        }
    }
    if spec.nan_rate > 0.0 {
        let mut rng = root.derive(STREAM_NAN);
        for v in x.iter_mut() {
            if rng.bernoulli(spec.nan_rate) {
                *v = f64::NAN;
            }
        }
    }
    Ok(x)
}

// ----------------------------------------------------------------------------
// Windows

/// A context/target pair with the context's normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesWindow {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    /// NaN flags over context followed by target.
    pub nan_mask: Vec<bool>,
    pub source_id: String,
    pub mean: f64,
    pub std: f64,
}

impl TimeSeriesWindow {
    /// Builds a window; returns `None` when the context has no finite value.
    pub fn new(context: Vec<f64>, target: Vec<f64>, source_id: impl Into<String>) -> Option<Self> {
        let (mean, std) = context_stats(&context).ok()?;
        let nan_mask = context.iter().chain(&target).map(|v| v.is_nan()).collect();
        Some(Self { context, target, nan_mask, source_id: source_id.into(), mean, std })
    }

    /// Context followed by target, raw scale.
    pub fn full(&self) -> Vec<f64> {
        self.context.iter().chain(&self.target).copied().collect()
    }
}

/// Windows of length `c + l` starting at `0, stride, 2·stride, ...`.
///
/// Windows whose context is entirely NaN are skipped.
pub fn sliding_windows(
    series: &[f64],
    c: usize,
    l: usize,
    stride: usize,
    source_id: &str,
) -> Vec<TimeSeriesWindow> {
    assert!(stride > 0, "stride must be positive");
    if c == 0 || series.len() < c + l {
        return Vec::new();
    }
    let count = (series.len() - c - l) / stride + 1;
    (0..count)
        .filter_map(|i| {
            let s = i * stride;
            TimeSeriesWindow::new(
                series[s..s + c].to_vec(),
                series[s + c..s + c + l].to_vec(),
                format!("{source_id}@{s}"),
            )
        })
        .collect()
}

// ----------------------------------------------------------------------------
// Series bank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBank {
    pub windows: Vec<Vec<f64>>,
    pub ids: Vec<String>,
}

impl SeriesBank {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, Vec::len)
    }

    /// Wraps already z-scored sequences.
    pub fn from_windows(windows: Vec<Vec<f64>>) -> Self {
        let ids = (0..windows.len()).map(|i| format!("w{i}")).collect();
        Self { windows, ids }
    }
}

/// Z-scores in place (population std, no clipping); `false` if constant.
fn zscore(x: &mut [f64]) -> bool {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var.sqrt() < STD_FLOOR {
        return false;
    }
    let s = var.sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / s;
    }
    true
}

/// `m` windows of length `t`, drawn round-robin from `specs`; window `i`
/// re-seeds its spec with sub-stream `i` of the spec's seed.
pub fn build_bank(specs: &[WaveformSpec], m: usize, t: usize) -> Result<SeriesBank, DatagenError> {
    if m == 0 || specs.is_empty() {
        return Err(DatagenError::InvalidSpec("bank needs m >= 1 and at least one spec".into()));
    }
    let mut windows = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    for i in 0..m {
        let j = i % specs.len();
        let base = &specs[j];
        let spec = WaveformSpec {
            length: t,
            normalize: false,
            nan_rate: 0.0,
            seed: SeededRng::new(base.seed).derive(i as u64).seed(),
            ..base.clone()
        };
        let mut x = generate_waveform(&spec)?;
        if !zscore(&mut x) {
            return Err(DatagenError::ConstantWindow { index: j, kind: base.kind });
        }
        windows.push(x);
        ids.push(format!("{}-{i}", base.kind.name()));
    }
    Ok(SeriesBank { windows, ids })
}

// ----------------------------------------------------------------------------
// Toy corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub vocab_size: usize,
    /// Candidate cycle lengths for periodic segments.
    pub motif_lengths: Vec<usize>,
    /// Probability that a segment copies an earlier span of the sequence.
    pub repetition_rate: f64,
    pub periodic_fraction: f64,
    pub trend_fraction: f64,
    pub sequence_length: usize,
    /// Inclusive range of segment lengths.
    pub segment_length: (usize, usize),
    /// Largest step of a monotone run.
    pub max_trend_step: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            motif_lengths: vec![2, 3, 4, 5, 6, 8],
            repetition_rate: 0.2,
            periodic_fraction: 0.4,
            trend_fraction: 0.3,
            sequence_length: 64,
            segment_length: (16, 48),
            max_trend_step: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Repeat,
    Periodic,
    Trend,
    Random,
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidCorpus(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        for (name, p) in [
            ("repetition_rate", self.repetition_rate),
            ("periodic_fraction", self.periodic_fraction),
            ("trend_fraction", self.trend_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.periodic_fraction + self.trend_fraction > 1.0 + 1e-12 {
            return bad("periodic_fraction + trend_fraction exceeds 1".into());
        }
        if self.periodic_fraction > 0.0
            && (self.motif_lengths.is_empty() || self.motif_lengths.iter().any(|&m| m < 1))
        {
            return bad("periodic segments need motif lengths >= 1".into());
        }
        let (lo, hi) = self.segment_length;
        if lo == 0 || lo > hi {
            return bad(format!("segment_length range ({lo}, {hi}) is empty"));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        if self.max_trend_step == 0 {
            return bad("max_trend_step must be positive".into());
        }
        Ok(())
    }
}

/// One corpus sequence and the kind of each of its segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSequence {
    pub tokens: TokenSequence,
    pub segments: Vec<(SegmentKind, usize)>,
}

pub fn generate_toy_corpus(
    spec: &ToyCorpusSpec,
    n_sequences: usize,
) -> Result<Vec<CorpusSequence>, DatagenError> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    Ok((0..n_sequences).map(|i| toy_sequence(spec, &mut root.derive(i as u64))).collect())
}

fn toy_sequence(spec: &ToyCorpusSpec, rng: &mut SeededRng) -> CorpusSequence {
    let v = spec.vocab_size;
    let (lo, hi) = spec.segment_length;
    let mut ids: Vec<u32> = Vec::with_capacity(spec.sequence_length);
    let mut segments = Vec::new();
    while ids.len() < spec.sequence_length {
        let len = (lo + rng.below(hi - lo + 1)).min(spec.sequence_length - ids.len());
        let kind = if ids.len() >= 2 && rng.bernoulli(spec.repetition_rate) {
            SegmentKind::Repeat
        } else {
            let u = rng.uniform();
            if u < spec.periodic_fraction {
                SegmentKind::Periodic
            } else if u < spec.periodic_fraction + spec.trend_fraction {
                SegmentKind::Trend
            } else {
                SegmentKind::Random
            }
        };
        match kind {
            SegmentKind::Repeat => {
                let span = len.min(ids.len());
                let start = rng.below(ids.len() - span + 1);
                for k in 0..len {
                    ids.push(ids[start + k % span]);
                }
            }
            SegmentKind::Periodic => {
                let m = spec.motif_lengths[rng.below(spec.motif_lengths.len())];
                let motif: Vec<u32> = (0..m).map(|_| rng.below(v) as u32).collect();
                ids.extend((0..len).map(|k| motif[k % m]));
            }
            SegmentKind::Trend => {
                let step = 1 + rng.below(spec.max_trend_step);
                let up = rng.bernoulli(0.5);
                let span = (len - 1) * step;
                let start = if span < v { rng.below(v - span) } else { 0 };
                let first = if up { start } else { v - 1 - start };
                ids.extend((0..len).map(|k| {
                    let off = (k * step) as i64;
                    let t = if up { first as i64 + off } else { first as i64 - off };
                    t.clamp(0, v as i64 - 1) as u32
                }));
            }
            SegmentKind::Random => ids.extend((0..len).map(|_| rng.below(v) as u32)),
        }
        segments.push((kind, len));
    }
    CorpusSequence { tokens: TokenSequence::new(ids), segments }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_samples() {
        let spec = WaveformSpec { amplitude: 1.0, ..WaveformSpec::new(WaveformKind::Sine, 4, 8, 0) };
        let x = generate_waveform(&spec).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_is_flat() {
        let x = generate_waveform(&WaveformSpec::new(WaveformKind::Constant, 4, 16, 0)).unwrap();
        assert!(x.iter().all(|&v| v == x[0]));
    }

    #[test]
    fn random_walk_increments_follow_rng() {
        let spec = WaveformSpec::new(WaveformKind::RandomWalk, 4, 32, 99);
        let x = generate_waveform(&spec).unwrap();
        let mut rng = SeededRng::new(99).derive(STREAM_SHAPE);
        let mut level = 0.0;
        assert_eq!(x[0], level);
        for &v in &x[1..] {
            level += rng.gaussian();
            assert_eq!(v, level);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_waveform(&WaveformSpec::new(WaveformKind::Sine, 1, 8, 0)).is_err());
        assert!(generate_waveform(&WaveformSpec::new(WaveformKind::Sine, 8, 15, 0)).is_err());
        assert!(generate_waveform(&WaveformSpec::new(WaveformKind::TwoFrequency, 4, 100, 0)).is_err());
        let bad = WaveformSpec { nan_rate: 1.5, ..WaveformSpec::default() };
        assert!(generate_waveform(&bad).is_err());
    }

    #[test]
    fn normalize_clips() {
        let spec = WaveformSpec {
            normalize: true,
            clip: 1.0,
            ..WaveformSpec::new(WaveformKind::LinearTrend, 4, 100, 0)
        };
        let x = generate_waveform(&spec).unwrap();
        assert!(x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn window_counts() {
        let s: Vec<f64> = (0..10).map(f64::from).collect();
        let w = sliding_windows(&s, 4, 2, 2, "s");
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].context, vec![4.0, 5.0, 6.0, 7.0]);
        assert_eq!(w[2].target, vec![8.0, 9.0]);
        assert_eq!(sliding_windows(&s[..6], 4, 2, 2, "s").len(), 1);
        assert_eq!(sliding_windows(&s[..5], 4, 2, 2, "s").len(), 0);
    }

    #[test]
    fn corpus_pure_cycles() {
        let spec = ToyCorpusSpec {
            motif_lengths: vec![3],
            repetition_rate: 0.0,
            periodic_fraction: 1.0,
            trend_fraction: 0.0,
            segment_length: (64, 64),
            ..ToyCorpusSpec::default()
        };
        for s in generate_toy_corpus(&spec, 20).unwrap() {
            let ids = &s.tokens.ids;
            assert!((3..ids.len()).all(|t| ids[t] == ids[t - 3]));
        }
    }

    #[test]
    fn corpus_rejects_bad_spec() {
        let spec = ToyCorpusSpec { vocab_size: 3, ..ToyCorpusSpec::default() };
        assert!(generate_toy_corpus(&spec, 1).is_err());
        let spec = ToyCorpusSpec { periodic_fraction: 0.8, trend_fraction: 0.5, ..Default::default() };
        assert!(generate_toy_corpus(&spec, 1).is_err());
    }
}
