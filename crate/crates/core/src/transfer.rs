//! Pretrained-vs-random transfer experiment: pretrain a model on the toy
//! language corpus, finetune it and an identically initialized random model
//! on a waveform mixture, and instrument both at every checkpoint.

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_toy_corpus, generate_waveform, sliding_windows, DatagenError, TimeSeriesWindow,
    ToyCorpusSpec, WaveformKind, WaveformSpec,
};
use crate::forecaster::{teacher_forced, ForecastConfig};
use crate::geometry::{
    erank_per_layer, gradient_alignment, phase_coherence, GeometryError, COHERENCE_EXCLUDE,
    ERANK_EXCLUDE,
};
use crate::metrics::{crps_approx, effective_transfer, LossCurve, MetricsError, TransferEstimate};
use crate::model::{AblationMask, Model, ModelConfig};
use crate::numerics::SeededRng;
use crate::scalar::Scalar;
use crate::tokenizer::BinTokenizerConfig;
use crate::trainer::{
    per_sample_gradients, pretrain_toy_language, train, Example, LossSpan, PretrainReport, Regime,
    TrainConfig, TrainError, TrainReport,
};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid transfer config: {0}")]
    Config(String),
}

/// Waveform families and periods of the finetuning mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub kinds: Vec<WaveformKind>,
    pub periods: Vec<usize>,
    pub series_length: usize,
    pub noise_std: f64,
    pub stride: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            kinds: vec![
                WaveformKind::Sine,
                WaveformKind::Square,
                WaveformKind::Sawtooth,
                WaveformKind::Seasonal,
                WaveformKind::DampedSine,
                WaveformKind::LinearTrend,
                WaveformKind::RandomWalk,
            ],
            periods: vec![6, 8, 10, 12, 16, 20],
            series_length: 256,
            noise_std: 0.05,
            stride: 8,
        }
    }
}

impl MixtureSpec {
    /// Windows from one series per (kind, period) pair, seeded from `seed`.
    pub fn windows(&self, seed: u64, context: usize, horizon: usize) -> Result<Vec<TimeSeriesWindow>, DatagenError> {
        let root = SeededRng::new(seed);
        let mut out = Vec::new();
        let mut k = 0u64;
        for &kind in &self.kinds {
            let periods: &[usize] =
                if kind.effective_period(2).is_some() { &self.periods } else { &self.periods[..1] };
            for &p in periods {
                let spec = WaveformSpec {
                    noise_std: self.noise_std,
                    random_phase: true,
                    ..WaveformSpec::new(kind, p, self.series_length, root.derive(k).seed())
                };
                k += 1;
                let x = generate_waveform(&spec)?;
                let id = format!("{}-p{p}", kind.name());
                out.extend(
                    sliding_windows(&x, context, horizon, self.stride, &id)
                        .into_iter()
                        .filter(|w| w.std > 1e-6),
                );
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub model: ModelConfig,
    pub corpus: ToyCorpusSpec,
    pub pretrain_sequences: usize,
    pub heldout_sequences: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub regime: Regime,
    pub forecast: ForecastConfig,
    pub mixture: MixtureSpec,
    pub context_len: usize,
    pub horizon: usize,
    pub loss_span: LossSpan,
    /// Held-out windows for CRPS evaluation.
    pub eval_windows: usize,
    /// Samples per gradient-alignment estimate.
    pub alignment_samples: usize,
    /// Windows pooled per effective-rank estimate.
    pub erank_windows: usize,
    pub coherence_period: usize,
    pub seeds: Vec<u64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let bins = 64;
        Self {
            model: ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                d_mlp: 128,
                vocab_size: bins + 1,
                max_positions: 64,
                ..ModelConfig::default()
            },
            corpus: ToyCorpusSpec { vocab_size: bins, sequence_length: 64, ..ToyCorpusSpec::default() },
            pretrain_sequences: 2048,
            heldout_sequences: 128,
            pretrain: TrainConfig { lr: 3e-3, total_steps: 600, batch_size: 16, ..TrainConfig::default() },
            finetune: TrainConfig { lr: 1e-3, total_steps: 256, batch_size: 16, ..TrainConfig::default() },
            regime: Regime::default(),
            forecast: ForecastConfig {
                tokenizer: BinTokenizerConfig { vocab_size: bins, bound: 3.0 },
                temperature: 1.0,
                ..ForecastConfig::default()
            },
            mixture: MixtureSpec::default(),
            context_len: 48,
            horizon: 16,
            loss_span: LossSpan::Horizon,
            eval_windows: 32,
            alignment_samples: 16,
            erank_windows: 16,
            coherence_period: 8,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub step: usize,
    pub alignment: f64,
    pub mean_erank: f64,
    pub erank: Vec<f64>,
    pub one_minus_coherence: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRun {
    pub label: String,
    pub checkpoints: Vec<CheckpointStats>,
    pub train: TrainReport,
}

impl InitRun {
    pub fn at(&self, step: usize) -> Option<&CheckpointStats> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    /// CRPS over checkpoint steps; step 0 is shifted to 0.5 for log-log
    /// interpolation.
    pub fn crps_curve(&self) -> Result<LossCurve, MetricsError> {
        let steps = self.checkpoints.iter().map(|c| (c.step as f64).max(0.5)).collect();
        let losses = self.checkpoints.iter().map(|c| c.crps).collect();
        LossCurve::new(steps, losses, self.label.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub pretrain: PretrainReport,
    pub pretrained: InitRun,
    pub random: InitRun,
}

/// Shared probes evaluated at every checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Probes {
    pub eval: Vec<TimeSeriesWindow>,
    pub alignment: Vec<Example>,
    pub erank_inputs: Vec<Vec<u32>>,
    pub sine: Vec<u32>,
}

pub fn probes(cfg: &TransferConfig, seed: u64) -> Result<Probes, TransferError> {
    let held = cfg.mixture.windows(SeededRng::new(seed).derive(1).seed(), cfg.context_len, cfg.horizon)?;
    if held.len() < cfg.eval_windows.max(cfg.alignment_samples).max(cfg.erank_windows) {
        return Err(TransferError::Config(format!("mixture gives only {} held-out windows", held.len())));
    }
    let mut order: Vec<usize> = (0..held.len()).collect();
    SeededRng::new(seed).derive(2).shuffle(&mut order);
    let held: Vec<TimeSeriesWindow> = order.into_iter().map(|i| held[i].clone()).collect();
    probes_from_windows(cfg, &held)
}

/// Probes from already-ordered held-out windows: evaluation takes the first
/// `eval_windows`, alignment the next `alignment_samples` (cycling), erank
/// inputs the first `erank_windows`.
pub fn probes_from_windows(cfg: &TransferConfig, held: &[TimeSeriesWindow]) -> Result<Probes, TransferError> {
    if held.is_empty() {
        return Err(TransferError::Config("no held-out windows".into()));
    }
    let pick = |n: usize, skip: usize| -> Vec<&TimeSeriesWindow> { held.iter().cycle().skip(skip).take(n).collect() };
    let eval = pick(cfg.eval_windows, 0).into_iter().cloned().collect();
    let alignment = pick(cfg.alignment_samples, cfg.eval_windows)
        .into_iter()
        .map(|w| Example::from_window(w, &cfg.forecast, cfg.loss_span))
        .collect();
    let erank_inputs = pick(cfg.erank_windows, 0)
        .into_iter()
        .map(|w| Example::from_window(w, &cfg.forecast, LossSpan::Full).input)
        .collect();
    let len = cfg.context_len + cfg.horizon - 1;
    let sine_spec = WaveformSpec::new(WaveformKind::Sine, cfg.coherence_period, len, 0);
    let sine_raw = generate_waveform(&sine_spec)?;
    let w = TimeSeriesWindow::new(sine_raw, Vec::new(), "sine")
        .ok_or_else(|| TransferError::Config("sine probe is all NaN".into()))?;
    let sine = Example::from_window(&w, &cfg.forecast, LossSpan::Full).input;
    Ok(Probes { eval, alignment, erank_inputs, sine })
}

/// Alignment, erank, coherence and CRPS of `model` on the shared probes.
pub fn measure<S: Scalar>(
    model: &Model<S>,
    cfg: &TransferConfig,
    probes: &Probes,
    step: usize,
) -> Result<CheckpointStats, TransferError> {
    let none = AblationMask::none();
    let grads = per_sample_gradients(model, &cfg.regime, &probes.alignment, &cfg.forecast)?;
    let alignment = gradient_alignment(&grads.vectors)?.value;
    let traces = probes
        .erank_inputs
        .iter()
        .map(|t| Ok(model.forward(t, &none, true)?.trace.expect("captured")))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let erank = erank_per_layer(&traces, ERANK_EXCLUDE)?;
    let mean_erank = erank.iter().sum::<f64>() / erank.len() as f64;
    let sine = model.forward(&probes.sine, &none, true).map_err(TrainError::from)?;
    let trace = sine.trace.expect("captured");
    let mid = &trace.hidden[(cfg.model.n_layers + 1) / 2];
    let one_minus_coherence = phase_coherence(mid, cfg.coherence_period, COHERENCE_EXCLUDE)?.one_minus;
    let mut crps = 0.0;
    for w in &probes.eval {
        let f = teacher_forced(model, &cfg.forecast, &w.context, &w.target).map_err(TrainError::from)?;
        crps += crps_approx(&f, &w.target)?;
    }
    crps /= probes.eval.len() as f64;
    Ok(CheckpointStats { step, alignment, mean_erank, erank, one_minus_coherence, crps })
}

fn finetune<S: Scalar>(
    mut model: Model<S>,
    label: &str,
    cfg: &TransferConfig,
    pool: &[Example],
    probes: &Probes,
    seed: u64,
) -> Result<InitRun, TransferError> {
    let mut checkpoints = Vec::new();
    let mut failure = None;
    let tc = TrainConfig { seed, ..cfg.finetune.clone() };
    let train = train(&mut model, &cfg.regime, &tc, &cfg.forecast, pool, &mut |step, m| {
        match measure(m, cfg, probes, step) {
            Ok(s) => checkpoints.push(s),
            Err(e) => failure = Some(e.to_string()),
        }
        failure.as_ref().map_or(Ok(()), |e| Err(TrainError::Callback(e.clone())))
    })?;
    Ok(InitRun { label: label.to_string(), checkpoints, train })
}

/// Pretrained and random runs for one seed; both start from the same
/// initialization, and only the pretrained one sees the toy corpus.
pub fn run_seed<S: Scalar>(cfg: &TransferConfig, seed: u64) -> Result<SeedRun, TransferError> {
    let model_cfg = ModelConfig { seed, ..cfg.model.clone() };
    if cfg.forecast.tokenizer.total_tokens() != model_cfg.vocab_size {
        return Err(TransferError::Config("model vocab must equal tokenizer bins + 1".into()));
    }
    let random = Model::<S>::init(model_cfg).map_err(TrainError::from)?;
    let mut pretrained = random.clone();
    let corpus_spec = ToyCorpusSpec { seed: SeededRng::new(seed).derive(3).seed(), ..cfg.corpus.clone() };
    let corpus = generate_toy_corpus(&corpus_spec, cfg.pretrain_sequences + cfg.heldout_sequences)?;
    let (train_seqs, held) = corpus.split_at(cfg.pretrain_sequences);
    let pt_cfg = TrainConfig { seed, checkpoint_steps: Some(Vec::new()), ..cfg.pretrain.clone() };
    let pretrain = pretrain_toy_language(&mut pretrained, train_seqs, held, &pt_cfg, &mut |_, _| Ok(()))?;

    let windows = cfg.mixture.windows(SeededRng::new(seed).derive(0).seed(), cfg.context_len, cfg.horizon)?;
    let pool: Vec<Example> =
        windows.iter().map(|w| Example::from_window(w, &cfg.forecast, cfg.loss_span)).collect();
    let probes = probes(cfg, seed)?;
    let ft_seed = SeededRng::new(seed).derive(4).seed();
    let pretrained = finetune(pretrained, "pretrained", cfg, &pool, &probes, ft_seed)?;
    let random = finetune(random, "random", cfg, &pool, &probes, ft_seed)?;
    Ok(SeedRun { seed, pretrain, pretrained, random })
}

// ----------------------------------------------------------------------------
// Transfer properties

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferVerdict {
    pub seed: u64,
    /// Step-1 alignment, pretrained and random.
    pub alignment: (f64, f64),
    pub alignment_holds: bool,
    pub transfer: Option<TransferEstimate>,
    pub transfer_holds: bool,
    /// `(initial, relative fall)` of the mean erank, pretrained and random.
    pub erank: ((f64, f64), (f64, f64)),
    pub erank_holds: bool,
    /// Step-1 `1 − coherence`, pretrained and random.
    pub coherence: (f64, f64),
    pub coherence_holds: bool,
}

impl TransferVerdict {
    pub fn holds(&self) -> bool {
        self.alignment_holds && self.transfer_holds && self.erank_holds && self.coherence_holds
    }
}

/// Checks the four directional transfer properties on one seed.
pub fn verdict(run: &SeedRun) -> Result<TransferVerdict, TransferError> {
    let step1 = |r: &InitRun| {
        r.at(1).cloned().ok_or_else(|| TransferError::Config(format!("{} has no step-1 checkpoint", r.label)))
    };
    let (p1, r1) = (step1(&run.pretrained)?, step1(&run.random)?);
    let alignment = (p1.alignment, r1.alignment);
    let alignment_holds = p1.alignment > 0.0 && p1.alignment >= 2.0 * r1.alignment;

    // Level: the random run's best CRPS by mid-training.
    let curve_r = run.random.crps_curve()?;
    let curve_p = run.pretrained.crps_curve()?;
    let last = run.random.checkpoints.last().map_or(0, |c| c.step);
    let level = run
        .random
        .checkpoints
        .iter()
        .filter(|c| c.step <= last / 2)
        .map(|c| c.crps)
        .fold(f64::INFINITY, f64::min);
    let transfer = effective_transfer(&curve_r, &curve_p, level).ok();
    let transfer_holds = transfer.as_ref().is_some_and(|t| t.ratio > 1.0);

    let fall = |r: &InitRun| {
        let first = r.checkpoints.first().map_or(f64::NAN, |c| c.mean_erank);
        let end = r.checkpoints.last().map_or(f64::NAN, |c| c.mean_erank);
        (first, (first - end) / first)
    };
    let (ep, er) = (fall(&run.pretrained), fall(&run.random));
    let erank_holds = er.0 > ep.0 && er.1 > ep.1;
    let coherence = (p1.one_minus_coherence, r1.one_minus_coherence);
    let coherence_holds = coherence.0 > coherence.1;
    Ok(TransferVerdict {
        seed: run.seed,
        alignment,
        alignment_holds,
        transfer,
        transfer_holds,
        erank: (ep, er),
        erank_holds,
        coherence,
        coherence_holds,
    })
}
