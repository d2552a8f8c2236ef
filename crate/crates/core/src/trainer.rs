//! Training loop, adaptation regimes and per-sample gradients.
//!
//! A training example is a token input plus one target per input position:
//! either a next token (language pretraining) or a normalized value scored by
//! the quantile loss (forecasting). The loss of an example is the mean over
//! its scored positions and a batch loss is the mean over examples.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{CorpusSequence, TimeSeriesWindow};
use crate::forecaster::{ForecastConfig, ForecastError};
use crate::model::{AblationMask, LoraConfig, Model, ModelError, Params};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::scalar::Scalar;
use crate::tokenizer::apply_stats;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite gradient for sample {sample}")]
    NonFiniteGradient { sample: usize },
    #[error("example {0} has no scored position")]
    NoTargets(usize),
    #[error("checkpoint callback failed: {0}")]
    Callback(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

// ----------------------------------------------------------------------------
// Regimes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Full,
    IoOnly,
    LoraAttn,
    LoraAttnIo,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 4] =
        [RegimeKind::Full, RegimeKind::IoOnly, RegimeKind::LoraAttn, RegimeKind::LoraAttnIo];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Full => "full",
            RegimeKind::IoOnly => "io_only",
            RegimeKind::LoraAttn => "lora_attn",
            RegimeKind::LoraAttnIo => "lora_attn_io",
        }
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, RegimeKind::LoraAttn | RegimeKind::LoraAttnIo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Regime {
    pub kind: RegimeKind,
    pub lora: LoraConfig,
}

impl Default for Regime {
    fn default() -> Self {
        Self { kind: RegimeKind::Full, lora: LoraConfig { rank: 4, alpha: 16.0, dropout: 0.05 } }
    }
}

impl Regime {
    pub fn new(kind: RegimeKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let l = &self.lora;
        if self.kind.uses_lora()
            && (l.rank == 0 || !(l.alpha > 0.0) || !(0.0..1.0).contains(&l.dropout))
        {
            return Err(TrainError::Config(format!(
                "lora needs rank >= 1, alpha > 0, dropout in [0, 1); got {l:?}"
            )));
        }
        Ok(())
    }

    /// Attaches adapters for the LoRA kinds (no-op otherwise or when already
    /// attached).
    pub fn prepare<S: Scalar>(&self, model: &mut Model<S>, seed: u64) -> Result<(), TrainError> {
        self.validate()?;
        if self.kind.uses_lora() && model.params.lora.is_none() {
            model.params.attach_lora(self.lora.clone(), model.config.init_scale, seed);
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        let io = name == "tok_embed" || name == "head";
        let lora = name.starts_with("lora.");
        match self.kind {
            RegimeKind::Full => !lora,
            RegimeKind::IoOnly => io,
            RegimeKind::LoraAttn => lora,
            RegimeKind::LoraAttnIo => lora || io,
        }
    }

    /// Names of the trainable tensors of `params`, in parameter order.
    pub fn trainable<S: Scalar>(&self, params: &Params<S>) -> Vec<String> {
        params.named().into_iter().map(|(n, _)| n).filter(|n| self.is_trainable(n)).collect()
    }
}

// ----------------------------------------------------------------------------
// Examples

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// Next-token ids; `None` positions are not scored.
    NextToken(Vec<Option<u32>>),
    /// Normalized values; NaN positions are not scored.
    Quantile(Vec<f64>),
}

/// Which positions of a forecasting window contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    /// Only predictions of target values.
    #[default]
    Horizon,
    /// Every next-value prediction, context included.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub targets: Targets,
}

impl Example {
    /// Language-model example: predict `seq[i + 1]` from `seq[..=i]`.
    pub fn next_token(seq: &[u32]) -> Self {
        let n = seq.len().saturating_sub(1);
        Self { input: seq[..n].to_vec(), targets: Targets::NextToken(seq[1..].iter().map(|&t| Some(t)).collect()) }
    }

    /// Forecasting example normalized with the context statistics. Position
    /// `i` of the input predicts value `i + 1` of the window.
    pub fn from_window(w: &TimeSeriesWindow, fc: &ForecastConfig, span: LossSpan) -> Self {
        let values = apply_stats(&w.full(), w.mean, w.std);
        let tokens = fc.tokenizer.tokenize(&values).ids;
        let n = values.len() - 1;
        let first = match span {
            LossSpan::Horizon => w.context.len() - 1,
            LossSpan::Full => 0,
        };
        let targets = (0..n).map(|i| if i >= first { values[i + 1] } else { f64::NAN }).collect();
        Self { input: tokens[..n].to_vec(), targets: Targets::Quantile(targets) }
    }

    pub fn scored_positions(&self) -> usize {
        match &self.targets {
            Targets::NextToken(t) => t.iter().filter(|v| v.is_some()).count(),
            Targets::Quantile(t) => t.iter().filter(|v| !v.is_nan()).count(),
        }
    }
}

/// Mean loss of one example and, if `want_grad`, `∂loss/∂logits`.
fn loss_rows<S: Scalar>(
    logits: &Matrix<S>,
    targets: &Targets,
    fc: &ForecastConfig,
    want_grad: bool,
) -> (f64, Option<Matrix<S>>, usize) {
    let (t, v) = logits.shape();
    let mut grad = want_grad.then(|| Matrix::zeros(t, v));
    let mut total = 0.0;
    let mut n = 0usize;
    match targets {
        Targets::NextToken(ids) => {
            for (i, id) in ids.iter().enumerate().take(t) {
                let Some(id) = *id else { continue };
                let row = logits.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
                let exps: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                total += z.ln() - (row[id as usize].as_f64() - max);
                n += 1;
                if let Some(g) = grad.as_mut() {
                    for (j, slot) in g.row_mut(i).iter_mut().enumerate() {
                        let p = exps[j] / z;
                        *slot = S::of(p - if j == id as usize { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Targets::Quantile(ys) => {
            for (i, &y) in ys.iter().enumerate().take(t) {
                if y.is_nan() {
                    continue;
                }
                let (l, dl) = fc.loss_and_grad(logits.row(i), y);
                total += l;
                n += 1;
                if let Some(g) = grad.as_mut() {
                    for (slot, d) in g.row_mut(i).iter_mut().zip(dl) {
                        *slot = S::of(d);
                    }
                }
            }
        }
    }
    if n == 0 {
        return (0.0, grad, 0);
    }
    let inv = 1.0 / n as f64;
    if let Some(g) = grad.as_mut() {
        g.scale(S::of(inv));
    }
    (total * inv, grad, n)
}

/// Loss of one example without gradients.
pub fn example_loss<S: Scalar>(
    model: &Model<S>,
    ex: &Example,
    fc: &ForecastConfig,
    mask: &AblationMask,
) -> Result<f64, TrainError> {
    let out = model.forward(&ex.input, mask, false)?;
    let (loss, _, n) = loss_rows(&out.logits, &ex.targets, fc, false);
    if n == 0 {
        return Err(TrainError::NoTargets(0));
    }
    Ok(loss)
}

/// Mean example loss over `examples`.
pub fn eval_loss<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    fc: &ForecastConfig,
    mask: &AblationMask,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("no evaluation examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(model, ex, fc, mask)?;
    }
    Ok(total / examples.len() as f64)
}

/// Adds `weight · ∂loss(ex)/∂θ` into `grads` and returns the example loss.
fn accumulate<S: Scalar>(
    model: &Model<S>,
    ex: &Example,
    fc: &ForecastConfig,
    weight: f64,
    dropout: Option<&mut SeededRng>,
    grads: &mut Params<S>,
) -> Result<(f64, usize), TrainError> {
    let (logits, cache) = model.forward_cached(&ex.input, &AblationMask::none(), dropout)?;
    let (loss, dl, n) = loss_rows(&logits, &ex.targets, fc, true);
    if n > 0 {
        let mut dl = dl.expect("gradient requested");
        dl.scale(S::of(weight));
        model.backward(&cache, &dl, grads);
    }
    Ok((loss, n))
}

// ----------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub end_factor: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip over trainable tensors.
    pub max_grad_norm: Option<f64>,
    /// Steps (completed updates) at which checkpoints are emitted; `None`
    /// gives 0, powers of two and the final step.
    pub checkpoint_steps: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            total_steps: 256,
            batch_size: 32,
            warmup_ratio: 0.03,
            end_factor: 1e-4,
            adam: AdamConfig::default(),
            max_grad_norm: Some(1.0),
            checkpoint_steps: None,
            seed: 420,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.end_factor) {
            return bad("warmup_ratio and end_factor must lie in [0, 1]".into());
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::with_ratio(self.lr, self.total_steps, self.warmup_ratio, self.end_factor)
    }

    pub fn checkpoints(&self) -> BTreeSet<usize> {
        match &self.checkpoint_steps {
            Some(s) => s.iter().copied().filter(|&k| k <= self.total_steps).collect(),
            None => power_of_two_steps(self.total_steps),
        }
    }
}

/// `{0, 1, 2, 4, …} ∪ {total}` up to `total`.
pub fn power_of_two_steps(total: usize) -> BTreeSet<usize> {
    let mut out: BTreeSet<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k <= total)
        .collect();
    out.insert(0);
    out.insert(total);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Pre-clip global norm of the trainable gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<usize>,
}

/// Batch indices drawn for `step`; without replacement when the pool allows.
pub fn batch_indices(seed: u64, step: usize, pool: usize, batch: usize) -> Vec<usize> {
    let mut rng = SeededRng::new(seed).derive(step as u64);
    if batch <= pool {
        rng.sample_indices(pool, batch)
    } else {
        (0..batch).map(|_| rng.below(pool)).collect()
    }
}

/// Runs `cfg.total_steps` AdamW updates on batches drawn from `pool`.
///
/// Only tensors the regime marks trainable are touched; `on_checkpoint` sees
/// the model after each checkpoint step's update (and before any update for
/// step 0).
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    regime: &Regime,
    cfg: &TrainConfig,
    fc: &ForecastConfig,
    pool: &[Example],
    on_checkpoint: &mut dyn FnMut(usize, &Model<S>) -> Result<(), TrainError>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    regime.prepare(model, cfg.seed)?;
    if pool.is_empty() {
        return Err(TrainError::Config("empty training pool".into()));
    }
    if let Some(i) = pool.iter().position(|e| e.scored_positions() == 0) {
        return Err(TrainError::NoTargets(i));
    }
    let schedule = cfg.schedule();
    let checkpoints = cfg.checkpoints();
    let trainable: Vec<bool> =
        model.params.named().iter().map(|(n, _)| regime.is_trainable(n)).collect();
    let decays: Vec<bool> =
        model.params.named().iter().map(|(_, m)| m.rows() > 1 && m.cols() > 1).collect();
    let mut adam = Adam::<S>::new(cfg.adam.clone());
    let dropout_root = SeededRng::new(cfg.seed).derive(u64::MAX);
    let mut report = TrainReport { steps: Vec::with_capacity(cfg.total_steps), checkpoints: Vec::new() };

    if checkpoints.contains(&0) {
        on_checkpoint(0, model)?;
        report.checkpoints.push(0);
    }
    for step in 0..cfg.total_steps {
        let batch = batch_indices(cfg.seed, step, pool.len(), cfg.batch_size);
        let weight = 1.0 / batch.len() as f64;
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let mut rng = dropout_root.derive(step as u64).derive(k as u64);
            let (l, _) = accumulate(model, &pool[i], fc, weight, Some(&mut rng), &mut grads)?;
            loss += l * weight;
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        let mut sq = 0.0;
        for ((_, g), &on) in grads.named().iter().zip(&trainable) {
            if on {
                sq += g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss: grad_norm });
        }
        let clip = match cfg.max_grad_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = schedule.lr(step);
        adam.begin_step();
        let mut grads_named = grads.named_mut();
        for (slot, ((_, p), on)) in model.params.named_mut().into_iter().zip(&trainable).enumerate() {
            if !*on {
                continue;
            }
            let g = grads_named[slot].1.data_mut();
            if clip < 1.0 {
                let c = S::of(clip);
                g.iter_mut().for_each(|x| *x *= c);
            }
            adam.update(slot, p.data_mut(), g, lr, decays[slot]);
        }
        report.steps.push(StepRecord { step, train_loss: loss, lr, grad_norm });
        if checkpoints.contains(&(step + 1)) {
            on_checkpoint(step + 1, model)?;
            report.checkpoints.push(step + 1);
        }
    }
    Ok(report)
}

// ----------------------------------------------------------------------------
// Toy language pretraining

/// Entropy (nats) of the empirical unigram distribution of next-token targets.
pub fn unigram_entropy(examples: &[Example]) -> f64 {
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for ex in examples {
        if let Targets::NextToken(ids) = &ex.targets {
            for id in ids.iter().flatten() {
                *counts.entry(*id).or_default() += 1;
            }
        }
    }
    let n: usize = counts.values().sum();
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train: TrainReport,
    pub heldout_loss: f64,
    pub unigram_entropy: f64,
}

/// Full-parameter next-token training on `train_seqs`, scored on `heldout`.
pub fn pretrain_toy_language<S: Scalar>(
    model: &mut Model<S>,
    train_seqs: &[CorpusSequence],
    heldout: &[CorpusSequence],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Model<S>) -> Result<(), TrainError>,
) -> Result<PretrainReport, TrainError> {
    let to_examples =
        |s: &[CorpusSequence]| s.iter().map(|c| Example::next_token(&c.tokens.ids)).collect::<Vec<_>>();
    let pool = to_examples(train_seqs);
    let held = to_examples(heldout);
    let fc = ForecastConfig::default();
    let train = train(model, &Regime::new(RegimeKind::Full), cfg, &fc, &pool, on_checkpoint)?;
    let heldout_loss = eval_loss(model, &held, &fc, &AblationMask::none())?;
    Ok(PretrainReport { train, heldout_loss, unigram_entropy: unigram_entropy(&pool) })
}

// ----------------------------------------------------------------------------
// Per-sample gradients

/// Flattened per-sample gradients over the trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub vectors: Vec<Vec<f64>>,
    /// `(tensor name, element count)` in flattening order.
    pub manifest: Vec<(String, usize)>,
    pub losses: Vec<f64>,
}

impl GradientBundle {
    pub fn dim(&self) -> usize {
        self.manifest.iter().map(|(_, n)| n).sum()
    }
}

fn flatten<S: Scalar>(grads: &Params<S>, regime: &Regime) -> Vec<f64> {
    grads
        .named()
        .into_iter()
        .filter(|(n, _)| regime.is_trainable(n))
        .flat_map(|(_, m)| m.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>())
        .collect()
}

/// Gradient of each example's own loss, without dropout.
pub fn per_sample_gradients<S: Scalar>(
    model: &Model<S>,
    regime: &Regime,
    examples: &[Example],
    fc: &ForecastConfig,
) -> Result<GradientBundle, TrainError> {
    if examples.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 samples, got {}", examples.len())));
    }
    let manifest: Vec<(String, usize)> = model
        .params
        .named()
        .into_iter()
        .filter(|(n, _)| regime.is_trainable(n))
        .map(|(n, m)| (n, m.data().len()))
        .collect();
    let mut vectors = Vec::with_capacity(examples.len());
    let mut losses = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut grads = model.params.zeros_like();
        let (loss, n) = accumulate(model, ex, fc, 1.0, None, &mut grads)?;
        if n == 0 {
            return Err(TrainError::NoTargets(i));
        }
        let v = flatten(&grads, regime);
        if !loss.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { sample: i });
        }
        vectors.push(v);
        losses.push(loss);
    }
    Ok(GradientBundle { vectors, manifest, losses })
}

/// Gradient of the mean loss over `examples`, flattened like
/// [`per_sample_gradients`].
pub fn batch_gradient<S: Scalar>(
    model: &Model<S>,
    regime: &Regime,
    examples: &[Example],
    fc: &ForecastConfig,
) -> Result<Vec<f64>, TrainError> {
    let mut grads = model.params.zeros_like();
    let w = 1.0 / examples.len() as f64;
    for ex in examples {
        accumulate(model, ex, fc, w, None, &mut grads)?;
    }
    Ok(flatten(&grads, regime))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_defaults() {
        let s: Vec<usize> = power_of_two_steps(20).into_iter().collect();
        assert_eq!(s, vec![0, 1, 2, 4, 8, 16, 20]);
    }

    #[test]
    fn trainable_sets() {
        let io = Regime::new(RegimeKind::IoOnly);
        assert!(io.is_trainable("tok_embed") && io.is_trainable("head"));
        assert!(!io.is_trainable("pos_embed") && !io.is_trainable("final_norm"));
        let lora = Regime::new(RegimeKind::LoraAttn);
        assert!(lora.is_trainable("lora.0.q.down") && !lora.is_trainable("layers.0.wq"));
        assert!(!Regime::new(RegimeKind::Full).is_trainable("lora.1.o.up"));
        assert!(Regime::new(RegimeKind::LoraAttnIo).is_trainable("head"));
    }

    #[test]
    fn window_example_alignment() {
        let w = TimeSeriesWindow::new(vec![0.0, 1.0, 2.0], vec![3.0, 4.0], "w").unwrap();
        let fc = ForecastConfig::default();
        let ex = Example::from_window(&w, &fc, LossSpan::Horizon);
        assert_eq!(ex.input.len(), 4);
        let Targets::Quantile(t) = &ex.targets else { panic!() };
        assert!(t[0].is_nan() && t[1].is_nan());
        let scale = (2.0f64 / 3.0).sqrt();
        assert!((t[2] - 2.0 / scale).abs() < 1e-12);
        assert!((t[3] - 3.0 / scale).abs() < 1e-12);
        assert_eq!(Example::from_window(&w, &fc, LossSpan::Full).scored_positions(), 4);
    }

    #[test]
    fn next_token_shift() {
        let ex = Example::next_token(&[5, 6, 7]);
        assert_eq!(ex.input, vec![5, 6]);
        assert_eq!(ex.targets, Targets::NextToken(vec![Some(6), Some(7)]));
    }

    #[test]
    fn unigram_entropy_uniform() {
        let ex = Example::next_token(&[0, 1, 2, 3, 0]);
        assert!((unigram_entropy(&[ex]) - 4f64.ln()).abs() < 1e-12);
    }
}
