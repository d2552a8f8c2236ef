//! Experiment configuration: one TOML file drives every subcommand.
//!
//! Unknown keys are rejected at every level. The resolved configuration (all
//! defaults filled in) is written to each run directory and hashed into its
//! manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tslab::crosscoder::CrosscoderConfig;
use tslab::datagen::{ToyCorpusSpec, WaveformKind};
use tslab::forecaster::{ForecastConfig, QuantileGrid};
use tslab::model::ModelConfig;
use tslab::probe::ProbeConfig;
use tslab::tokenizer::BinTokenizerConfig;
use tslab::trainer::{LossSpan, Regime, TrainConfig};
use tslab::transfer::{MixtureSpec, TransferConfig};

use crate::error::{CliError, Result};

pub const OUTPUT_ROOT_ENV: &str = "TSLAB_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub tokenizer: BinTokenizerConfig,
    pub forecast: ForecastSection,
    pub trainer: TrainerSection,
    pub datagen: DatagenSection,
    pub geometry: GeometrySection,
    pub probe: ProbeSection,
    pub crosscoder: CrosscoderSection,
    pub circuits: CircuitsSection,
    pub metrics: MetricsSection,
    pub transfer: TransferSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub quantiles: QuantileGrid,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub regime: Regime,
    pub loss_span: LossSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub corpus: ToyCorpusSpec,
    pub pretrain_sequences: usize,
    pub heldout_sequences: usize,
    pub mixture: MixtureSpec,
    pub context_len: usize,
    pub horizon: usize,
    pub eval_windows: usize,
    pub bank: BankSection,
}

/// Waveform bank the probe matches against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    pub kinds: Vec<WaveformKind>,
    pub periods: Vec<usize>,
    pub windows: usize,
    /// Window length; also the length of every probe input sequence.
    pub length: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub alignment_samples: usize,
    pub erank_windows: usize,
    pub coherence_period: usize,
    pub pca_components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub em: ProbeConfig,
    /// Probe inputs per condition (text and random tokens).
    pub inputs: usize,
    pub ks: Vec<usize>,
    pub retrieval_queries: usize,
    /// Observed prefix length of each retrieval query.
    pub retrieval_split: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrosscoderSection {
    pub train: CrosscoderConfig,
    /// Residual-stream index (0 is the embedding output).
    pub layer: usize,
    pub windows: usize,
    pub threshold: f64,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircuitsSection {
    pub windows_per_kind: usize,
    pub period: usize,
    pub top_n: usize,
    pub corpus_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Seasonal lag of the MASE denominator.
    pub seasonality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub seeds: Vec<u64>,
}

// ----------------------------------------------------------------------------
// Defaults (sized like the transfer study defaults)

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TransferConfig::default();
        Self {
            seed: 420,
            output_dir: PathBuf::from("runs"),
            model: t.model.clone(),
            tokenizer: t.forecast.tokenizer.clone(),
            forecast: ForecastSection { quantiles: t.forecast.quantiles.clone(), temperature: t.forecast.temperature },
            trainer: TrainerSection {
                pretrain: t.pretrain.clone(),
                finetune: t.finetune.clone(),
                regime: t.regime.clone(),
                loss_span: t.loss_span,
            },
            datagen: DatagenSection {
                corpus: t.corpus.clone(),
                pretrain_sequences: t.pretrain_sequences,
                heldout_sequences: t.heldout_sequences,
                mixture: t.mixture.clone(),
                context_len: t.context_len,
                horizon: t.horizon,
                eval_windows: t.eval_windows,
                bank: BankSection::default(),
            },
            geometry: GeometrySection {
                alignment_samples: t.alignment_samples,
                erank_windows: t.erank_windows,
                coherence_period: t.coherence_period,
                pca_components: 3,
            },
            probe: ProbeSection::default(),
            crosscoder: CrosscoderSection::default(),
            circuits: CircuitsSection::default(),
            metrics: MetricsSection::default(),
            transfer: TransferSection { seeds: t.seeds },
        }
    }
}

impl Default for ForecastSection {
    fn default() -> Self {
        ExperimentConfig::default().forecast
    }
}

impl Default for TrainerSection {
    fn default() -> Self {
        ExperimentConfig::default().trainer
    }
}

impl Default for DatagenSection {
    fn default() -> Self {
        ExperimentConfig::default().datagen
    }
}

impl Default for GeometrySection {
    fn default() -> Self {
        ExperimentConfig::default().geometry
    }
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { seeds: TransferConfig::default().seeds }
    }
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            kinds: WaveformKind::ALL
                .into_iter()
                .filter(|k| !matches!(k, WaveformKind::TwoFrequency | WaveformKind::TrendOscillation))
                .collect(),
            periods: vec![4, 6, 8, 12, 16],
            windows: 512,
            length: 32,
            noise_std: 0.05,
        }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            em: ProbeConfig { epochs: 30, candidates: 128, ..ProbeConfig::default() },
            inputs: 256,
            ks: vec![4, 16, 64],
            retrieval_queries: 500,
            retrieval_split: 24,
        }
    }
}

impl Default for CrosscoderSection {
    fn default() -> Self {
        let d = TransferConfig::default().model.d_model;
        Self {
            train: CrosscoderConfig {
                d,
                features: 128,
                k: 8,
                aux_k: 32,
                total_steps: 1500,
                warmup_steps: 100,
                aux_start_step: 300,
                dead_window: 300,
                lr: 1e-3,
                ..CrosscoderConfig::default()
            },
            layer: 1,
            windows: 64,
            threshold: 0.01,
            top_n: 10,
        }
    }
}

impl Default for CircuitsSection {
    fn default() -> Self {
        Self { windows_per_kind: 8, period: 8, top_n: 4, corpus_sequences: 64 }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { seasonality: 1 }
    }
}

// ----------------------------------------------------------------------------
// Loading and validation

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn forecast_config(&self) -> ForecastConfig {
        ForecastConfig {
            tokenizer: self.tokenizer.clone(),
            quantiles: self.forecast.quantiles.clone(),
            temperature: self.forecast.temperature,
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        let d = &self.datagen;
        let g = &self.geometry;
        TransferConfig {
            model: self.model.clone(),
            corpus: d.corpus.clone(),
            pretrain_sequences: d.pretrain_sequences,
            heldout_sequences: d.heldout_sequences,
            pretrain: self.trainer.pretrain.clone(),
            finetune: self.trainer.finetune.clone(),
            regime: self.trainer.regime.clone(),
            forecast: self.forecast_config(),
            mixture: d.mixture.clone(),
            context_len: d.context_len,
            horizon: d.horizon,
            loss_span: self.trainer.loss_span,
            eval_windows: d.eval_windows,
            alignment_samples: g.alignment_samples,
            erank_windows: g.erank_windows,
            coherence_period: g.coherence_period,
            seeds: self.transfer.seeds.clone(),
        }
    }

    /// Run root: `$TSLAB_OUTPUT_ROOT` when set, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate()?;
        self.forecast_config().validate()?;
        self.trainer.pretrain.validate()?;
        self.trainer.finetune.validate()?;
        self.trainer.regime.validate()?;
        self.datagen.corpus.validate()?;
        if self.tokenizer.total_tokens() != self.model.vocab_size {
            return bad(format!(
                "model.vocab_size {} must equal tokenizer.vocab_size + 1 = {}",
                self.model.vocab_size,
                self.tokenizer.total_tokens()
            ));
        }
        if self.datagen.corpus.vocab_size > self.model.vocab_size {
            return bad("datagen.corpus.vocab_size exceeds model.vocab_size".into());
        }
        let max = self.model.max_positions;
        let d = &self.datagen;
        if d.context_len == 0 || d.horizon == 0 || d.context_len + d.horizon > max + 1 {
            return bad(format!("context_len + horizon must lie in 2..={} for max_positions {max}", max + 1));
        }
        if d.corpus.sequence_length > max {
            return bad("datagen.corpus.sequence_length exceeds model.max_positions".into());
        }
        let b = &d.bank;
        if b.kinds.is_empty() || b.periods.is_empty() || b.windows == 0 {
            return bad("datagen.bank needs kinds, periods and windows".into());
        }
        if b.length < 2 || b.length > max || b.length > d.corpus.sequence_length {
            return bad(format!("datagen.bank.length {} must lie in 2..=min(max_positions, sequence_length)", b.length));
        }
        for k in &b.kinds {
            if let Some(p) = b.periods.iter().filter_map(|&p| k.effective_period(p)).find(|&p| 2 * p > b.length) {
                return bad(format!("datagen.bank.length {} is shorter than two periods ({p}) of {k:?}", b.length));
            }
        }
        self.probe.em.validate(b.windows)?;
        let p = &self.probe;
        if p.inputs == 0 || p.ks.is_empty() || p.ks.contains(&0) {
            return bad("probe needs inputs >= 1 and positive ks".into());
        }
        if p.retrieval_split == 0 || p.retrieval_split >= b.length {
            return bad("probe.retrieval_split must lie in 1..bank.length".into());
        }
        let c = &self.crosscoder;
        c.train.validate()?;
        if c.train.d != self.model.d_model {
            return bad(format!("crosscoder.train.d {} must equal model.d_model {}", c.train.d, self.model.d_model));
        }
        if c.layer > self.model.n_layers || c.windows == 0 {
            return bad("crosscoder.layer must be <= n_layers and windows >= 1".into());
        }
        if !(0.0..1.0).contains(&c.threshold) {
            return bad("crosscoder.threshold must lie in [0, 1)".into());
        }
        let k = &self.circuits;
        if k.windows_per_kind == 0 || k.period < 2 || k.corpus_sequences == 0 {
            return bad("circuits needs windows_per_kind >= 1, period >= 2, corpus_sequences >= 1".into());
        }
        if self.metrics.seasonality == 0 {
            return bad("metrics.seasonality must be positive".into());
        }
        let g = &self.geometry;
        if g.coherence_period < 2 || g.pca_components == 0 || g.erank_windows == 0 {
            return bad("geometry needs coherence_period >= 2, pca_components >= 1, erank_windows >= 1".into());
        }
        if self.transfer.seeds.is_empty() {
            return bad("transfer.seeds is empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in ["bogus = 1", "[model]\nwidth = 3", "[trainer.pretrain]\nlearning_rate = 0.1", "[probe.em]\nx = 1"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let text = "[model]\nvocab_size = 10";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))));
    }
}
