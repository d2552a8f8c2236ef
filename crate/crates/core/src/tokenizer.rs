//! Uniform bin tokenizer over a symmetric range, with a dedicated NaN token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound on the normalization scale.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("context has no finite values")]
    AllNan,
    #[error("token id {id} exceeds the NaN token id {max}")]
    IdOutOfRange { id: u32, max: u32 },
    #[error("invalid tokenizer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinTokenizerConfig {
    /// Number of value bins `V`; the NaN token is id `V`.
    pub vocab_size: usize,
    /// Bins span `[-bound, bound]`.
    pub bound: f64,
}

impl Default for BinTokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 1024, bound: 5.0 }
    }
}

/// Bin ids in `[0, V]`, where `V` marks a missing value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Context-normalized values plus the statistics used.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// True when the population std fell below [`STD_FLOOR`].
    pub floored: bool,
}

/// Population mean and std over the finite entries of `x`.
pub fn context_stats(x: &[f64]) -> Result<(f64, f64), TokenizerError> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for &v in x.iter().filter(|v| !v.is_nan()) {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return Err(TokenizerError::AllNan);
    }
    let mean = sum / n as f64;
    let var = x.iter().filter(|v| !v.is_nan()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

/// Z-scores `context` with its own statistics; NaN stays NaN.
pub fn normalize(context: &[f64]) -> Result<Normalized, TokenizerError> {
    let (mean, std) = context_stats(context)?;
    let scale = std.max(STD_FLOOR);
    let values = context.iter().map(|&v| if v.is_nan() { v } else { (v - mean) / scale }).collect();
    Ok(Normalized { values, mean, std, floored: std < STD_FLOOR })
}

/// Applies existing statistics (e.g. the context's) to another segment.
pub fn apply_stats(x: &[f64], mean: f64, std: f64) -> Vec<f64> {
    let scale = std.max(STD_FLOOR);
    x.iter().map(|&v| if v.is_nan() { v } else { (v - mean) / scale }).collect()
}

pub fn denormalize(x: &[f64], mean: f64, std: f64) -> Vec<f64> {
    let scale = std.max(STD_FLOOR);
    x.iter().map(|&v| v * scale + mean).collect()
}

impl BinTokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.vocab_size < 2 {
            return Err(TokenizerError::Config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(TokenizerError::Config(format!("bound {} must be positive", self.bound)));
        }
        Ok(())
    }

    pub fn nan_token_id(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Model vocabulary size: value bins plus the NaN token.
    pub fn total_tokens(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.bound / self.vocab_size as f64
    }

    pub fn left_edge(&self, id: usize) -> f64 {
        -self.bound + id as f64 * self.bin_width()
    }

    pub fn bin_center(&self, id: usize) -> f64 {
        -self.bound + (id as f64 + 0.5) * self.bin_width()
    }

    pub fn token(&self, x: f64) -> u32 {
        if x.is_nan() {
            return self.nan_token_id();
        }
        let v = self.vocab_size as f64;
        let raw = ((x + self.bound) * v / (2.0 * self.bound)).floor();
        raw.clamp(0.0, v - 1.0) as u32
    }

    pub fn tokenize(&self, values: &[f64]) -> TokenSequence {
        TokenSequence::new(values.iter().map(|&x| self.token(x)).collect())
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<Vec<f64>, TokenizerError> {
        let nan = self.nan_token_id();
        seq.ids
            .iter()
            .map(|&id| match id {
                i if i < nan => Ok(self.bin_center(i as usize)),
                i if i == nan => Ok(f64::NAN),
                i => Err(TokenizerError::IdOutOfRange { id: i, max: nan }),
            })
            .collect()
    }
}
