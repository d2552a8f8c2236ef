//! Small decoder-only causal transformer with activation capture and
//! component zero-ablation.
//!
//! Pre-norm blocks (RMS norm with learned gain), learned absolute position
//! embeddings, multi-head causal attention, and a two-layer tanh-GELU MLP. No
//! bias terms. Backpropagation is written out by hand in [`transformer`].

mod params;
mod transformer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub use params::{Adapter, LayerParams, Lora, LoraConfig, LoraLayer, Params};
pub use transformer::{Cache, ForwardOutput};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, position: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("ablation index out of range: {0}")]
    BadMask(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    /// Total token count, including any special tokens.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 1025,
            max_positions: 512,
            init_scale: 0.3,
            seed: 420,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the layer-major concatenation of all hidden states.
    pub fn concat_dim(&self) -> usize {
        (self.n_layers + 1) * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config(format!("init_scale {} must be positive", self.init_scale)));
        }
        Ok(())
    }
}

/// Components whose outputs are replaced with zeros.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    /// `(layer, head)` pairs; the head's slice of the attention output is
    /// zeroed before the output projection.
    pub heads: BTreeSet<(usize, usize)>,
    /// Layers whose MLP output is zeroed.
    pub mlps: BTreeSet<usize>,
}

impl AblationMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty() && self.mlps.is_empty()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            heads: self.heads.union(&other.heads).copied().collect(),
            mlps: self.mlps.union(&other.mlps).copied().collect(),
        }
    }

    pub fn everything(config: &ModelConfig) -> Self {
        Self {
            heads: (0..config.n_layers)
                .flat_map(|l| (0..config.n_heads).map(move |h| (l, h)))
                .collect(),
            mlps: (0..config.n_layers).collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if let Some(&(l, h)) =
            self.heads.iter().find(|&&(l, h)| l >= config.n_layers || h >= config.n_heads)
        {
            return Err(ModelError::BadMask(format!("head ({l}, {h})")));
        }
        if let Some(&l) = self.mlps.iter().find(|&&l| l >= config.n_layers) {
            return Err(ModelError::BadMask(format!("mlp {l}")));
        }
        Ok(())
    }
}

/// Hidden states per layer; entry 0 is the embedding output and entry `l` the
/// residual stream after block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<S> {
    pub hidden: Vec<Matrix<S>>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn positions(&self) -> usize {
        self.hidden[0].rows()
    }

    /// Layer-major concatenation, `positions × (n_layers + 1)·d_model`.
    pub fn concat_hidden(&self) -> Matrix<S> {
        let t = self.positions();
        let d = self.hidden[0].cols();
        let n = self.hidden.len();
        Matrix::from_fn(t, n * d, |i, j| self.hidden[j / d][(i, j % d)])
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: Params<S>,
}

impl<S: Scalar> Model<S> {
    /// Random initialization: Gaussian entries with std `init_scale / √fan_in`,
    /// gains at one.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    /// Builds a model around existing tensors (e.g. from a checkpoint).
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Matrix<S>)]) -> Result<Self, ModelError> {
        let mut model = Self::init(config)?;
        if tensors.iter().any(|(n, _)| n.starts_with("lora.")) {
            return Err(ModelError::Config("attach adapters before loading lora tensors".into()));
        }
        model.params.load_named(tensors)?;
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_positions {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_positions });
        }
        if let Some((position, &token)) =
            tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange { token, position, vocab: self.config.vocab_size });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_ordering() {
        let trace = ActivationTrace {
            hidden: vec![
                Matrix::from_rows(&[vec![1.0f64, 2.0]]).unwrap(),
                Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap(),
            ],
        };
        assert_eq!(trace.concat_hidden().row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn full_scale_concat_width() {
        let c = ModelConfig { n_layers: 27, d_model: 1024, n_heads: 16, ..ModelConfig::default() };
        assert_eq!(c.concat_dim(), 28 * 1024);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 10, n_heads: 4, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn mask_validation() {
        let c = ModelConfig::default();
        let mut m = AblationMask::none();
        m.heads.insert((4, 0));
        assert!(m.validate(&c).is_err());
        assert_eq!(AblationMask::everything(&c).heads.len(), 16);
    }
}

// ----------------------------------------------------------------------------
// Gradient check

/// Per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// of the backward pass against central differences, for the linear loss
/// `L = Σ weights ⊙ logits`.
pub fn gradient_check(
    model: &Model<f64>,
    tokens: &[u32],
    mask: &AblationMask,
    weights: &Matrix<f64>,
    h: f64,
) -> Result<Vec<(String, f64)>, ModelError> {
    let loss = |m: &Model<f64>| -> Result<f64, ModelError> {
        let out = m.forward(tokens, mask, false)?;
        Ok(out.logits.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let (_, cache) = model.forward_cached(tokens, mask, None)?;
    let mut grads = model.params.zeros_like();
    model.backward(&cache, weights, &mut grads);

    let mut probe = model.clone();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut report = Vec::with_capacity(names.len());
    for (idx, name) in names.iter().enumerate() {
        let len = model.params.named()[idx].1.data().len();
        let analytic = grads.named()[idx].1.data().to_vec();
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params.named()[idx].1.data()[e];
            probe.params.named_mut()[idx].1.data_mut()[e] = orig + h;
            let up = loss(&probe)?;
            probe.params.named_mut()[idx].1.data_mut()[e] = orig - h;
            let down = loss(&probe)?;
            probe.params.named_mut()[idx].1.data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        report.push((name.clone(), if denom > 0.0 { diff / denom } else { 0.0 }));
    }
    Ok(report)
}
