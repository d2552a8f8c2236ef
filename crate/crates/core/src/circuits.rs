//! Zero-ablation circuit discovery: per-component sweeps with selectivity,
//! set composition with the superadditivity ratio, per-sequence transfer
//! evaluation, and small hand-built models with known circuits.

use std::cmp::Ordering;

use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecaster::ForecastConfig;
use crate::model::{AblationMask, Model, ModelConfig, ModelError};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;
use crate::trainer::{example_loss, Example, TrainError};

/// `ρ` above this marks a composed circuit.
pub const SUPERADDITIVE_THRESHOLD: f64 = 1.2;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("component {0} is outside the model")]
    OutOfRange(String),
    #[error("component {0} has no individual sweep result")]
    MissingIndividual(String),
    #[error("baseline loss is non-finite on {set} window {window}")]
    NonFiniteBaseline { set: &'static str, window: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ----------------------------------------------------------------------------
// Components

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Head,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub kind: ComponentKind,
    pub layer: usize,
    /// Head index; `None` for MLPs.
    pub head: Option<usize>,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self { kind: ComponentKind::Head, layer, head: Some(head) }
    }

    pub fn mlp(layer: usize) -> Self {
        Self { kind: ComponentKind::Mlp, layer, head: None }
    }

    /// `L{layer}H{head}` or `MLP_L{layer}`.
    pub fn name(&self) -> String {
        match (self.kind, self.head) {
            (ComponentKind::Head, Some(h)) => format!("L{}H{}", self.layer, h),
            _ => format!("MLP_L{}", self.layer),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), CircuitError> {
        let ok = self.layer < cfg.n_layers
            && match (self.kind, self.head) {
                (ComponentKind::Head, Some(h)) => h < cfg.n_heads,
                (ComponentKind::Mlp, None) => true,
                _ => false,
            };
        if ok {
            Ok(())
        } else {
            Err(CircuitError::OutOfRange(self.name()))
        }
    }
}

impl std::fmt::Display for ComponentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Every head and MLP, layer by layer (heads first within a layer).
pub fn all_components(cfg: &ModelConfig) -> Vec<ComponentId> {
    (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |h| ComponentId::head(l, h)).chain(std::iter::once(ComponentId::mlp(l))))
        .collect()
}

/// Union mask of a component set; insertion order is irrelevant.
pub fn mask_of(components: &[ComponentId]) -> AblationMask {
    let mut mask = AblationMask::none();
    for c in components {
        match (c.kind, c.head) {
            (ComponentKind::Head, Some(h)) => {
                mask.heads.insert((c.layer, h));
            }
            _ => {
                mask.mlps.insert(c.layer);
            }
        }
    }
    mask
}

// ----------------------------------------------------------------------------
// Exact formulas

/// `ΔL_periodic − ΔL_control`.
pub fn selectivity<T: Num + Copy>(delta_periodic: T, delta_control: T) -> T {
    delta_periodic - delta_control
}

/// `combined / Σ individual`, undefined when the sum is not positive.
pub fn superadditivity<T: Num + Copy + PartialOrd>(combined: T, individuals: &[T]) -> Option<T> {
    let sum = individuals.iter().fold(T::zero(), |a, &b| a + b);
    (sum > T::zero()).then(|| combined / sum)
}

/// `ρ > 6/5` without leaving `T`.
pub fn is_superadditive<T: Num + Copy + PartialOrd>(rho: T) -> bool {
    let one = T::one();
    let five = one + one + one + one + one;
    rho * five > five + one
}

// ----------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: ComponentId,
    pub delta_periodic: f64,
    pub delta_control: f64,
    pub selectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_periodic: f64,
    pub baseline_control: f64,
    pub periodic_windows: usize,
    pub control_windows: usize,
    /// In [`all_components`] order.
    pub components: Vec<ComponentResult>,
    /// `(component, set, window)` triples whose ablated loss was non-finite;
    /// those windows are left out of that component's means.
    pub flagged: Vec<(ComponentId, String, usize)>,
}

impl AblationReport {
    pub fn get(&self, c: &ComponentId) -> Option<&ComponentResult> {
        self.components.iter().find(|r| &r.component == c)
    }

    /// Components ordered by `key` descending, ties by component order.
    pub fn ranked_by(&self, key: impl Fn(&ComponentResult) -> f64) -> Vec<&ComponentResult> {
        let mut v: Vec<&ComponentResult> = self.components.iter().collect();
        v.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap_or(Ordering::Equal).then(a.component.cmp(&b.component)));
        v
    }
}

fn losses<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    fc: &ForecastConfig,
    mask: &AblationMask,
) -> Result<Vec<f64>, CircuitError> {
    examples.iter().map(|ex| Ok(example_loss(model, ex, fc, mask)?)).collect()
}

fn baseline(losses: &[f64], set: &'static str) -> Result<f64, CircuitError> {
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(CircuitError::NonFiniteBaseline { set, window: i });
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean of `ablated − base` over windows with a finite ablated loss.
fn mean_delta(ablated: &[f64], base: &[f64], flag: &mut dyn FnMut(usize)) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for (i, (a, b)) in ablated.iter().zip(base).enumerate() {
        if a.is_finite() {
            total += a - b;
            n += 1;
        } else {
            flag(i);
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

struct Baselines {
    periodic: Vec<f64>,
    control: Vec<f64>,
}

fn ablation_deltas<S: Scalar>(
    model: &Model<S>,
    set: &[ComponentId],
    periodic: &[Example],
    control: &[Example],
    fc: &ForecastConfig,
    base: &Baselines,
    flagged: &mut Vec<(usize, &'static str)>,
) -> Result<(f64, f64), CircuitError> {
    let mask = mask_of(set);
    let p = losses(model, periodic, fc, &mask)?;
    let c = losses(model, control, fc, &mask)?;
    let dp = mean_delta(&p, &base.periodic, &mut |i| flagged.push((i, "periodic")));
    let dc = mean_delta(&c, &base.control, &mut |i| flagged.push((i, "control")));
    Ok((dp, dc))
}

fn check_sets(periodic: &[Example], control: &[Example]) -> Result<(), CircuitError> {
    if periodic.is_empty() {
        return Err(CircuitError::Empty("periodic set"));
    }
    if control.is_empty() {
        return Err(CircuitError::Empty("control set"));
    }
    Ok(())
}

/// Zero-ablates every component in turn and records the mean loss increase
/// on the periodic and control sets, each against a once-computed baseline.
pub fn sweep<S: Scalar>(
    model: &Model<S>,
    periodic: &[Example],
    control: &[Example],
    fc: &ForecastConfig,
) -> Result<AblationReport, CircuitError> {
    check_sets(periodic, control)?;
    let none = AblationMask::none();
    let base = Baselines { periodic: losses(model, periodic, fc, &none)?, control: losses(model, control, fc, &none)? };
    let baseline_periodic = baseline(&base.periodic, "periodic")?;
    let baseline_control = baseline(&base.control, "control")?;
    let mut components = Vec::new();
    let mut flagged = Vec::new();
    for c in all_components(&model.config) {
        let mut f = Vec::new();
        let (dp, dc) = ablation_deltas(model, &[c], periodic, control, fc, &base, &mut f)?;
        flagged.extend(f.into_iter().map(|(i, set)| (c, set.to_string(), i)));
        components.push(ComponentResult { component: c, delta_periodic: dp, delta_control: dc, selectivity: selectivity(dp, dc) });
    }
    Ok(AblationReport {
        baseline_periodic,
        baseline_control,
        periodic_windows: periodic.len(),
        control_windows: control.len(),
        components,
        flagged,
    })
}

// ----------------------------------------------------------------------------
// Composition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub components: Vec<ComponentId>,
    pub combined_periodic: f64,
    pub sum_individual: f64,
    /// `None` when the individual sum is not positive.
    pub rho: Option<f64>,
    pub superadditive: bool,
    pub combined_control: f64,
}

/// Ablates each set jointly and compares with the sum of the members'
/// individual periodic increases.
pub fn compose<S: Scalar>(
    model: &Model<S>,
    sets: &[Vec<ComponentId>],
    individual: &AblationReport,
    periodic: &[Example],
    control: &[Example],
    fc: &ForecastConfig,
) -> Result<Vec<CompositionReport>, CircuitError> {
    check_sets(periodic, control)?;
    let none = AblationMask::none();
    let base = Baselines { periodic: losses(model, periodic, fc, &none)?, control: losses(model, control, fc, &none)? };
    sets.iter()
        .map(|set| {
            if set.is_empty() {
                return Err(CircuitError::Empty("component set"));
            }
            let singles = set
                .iter()
                .map(|c| {
                    c.validate(&model.config)?;
                    individual.get(c).map(|r| r.delta_periodic).ok_or_else(|| CircuitError::MissingIndividual(c.name()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let (dp, dc) = if set.len() == 1 {
                let r = individual.get(&set[0]).expect("checked above");
                (r.delta_periodic, r.delta_control)
            } else {
                ablation_deltas(model, set, periodic, control, fc, &base, &mut Vec::new())?
            };
            let rho = superadditivity(dp, &singles);
            Ok(CompositionReport {
                components: set.clone(),
                combined_periodic: dp,
                sum_individual: singles.iter().sum(),
                superadditive: rho.is_some_and(|r| r > SUPERADDITIVE_THRESHOLD),
                rho,
                combined_control: dc,
            })
        })
        .collect()
}

/// Top `n` components by individual periodic increase.
pub fn top_components(report: &AblationReport, n: usize) -> Vec<ComponentId> {
    report.ranked_by(|r| r.delta_periodic).into_iter().take(n).map(|r| r.component).collect()
}

/// All unordered pairs of the top `n` components.
pub fn top_pairs(report: &AblationReport, n: usize) -> Vec<Vec<ComponentId>> {
    let top = top_components(report, n);
    let mut out = Vec::new();
    for i in 0..top.len() {
        for j in (i + 1)..top.len() {
            out.push(vec![top[i], top[j]]);
        }
    }
    out
}

/// Prefixes of the top `n` components in order of individual increase.
pub fn cumulative_sets(report: &AblationReport, n: usize) -> Vec<Vec<ComponentId>> {
    let top = top_components(report, n);
    (1..=top.len()).map(|k| top[..k].to_vec()).collect()
}

// ----------------------------------------------------------------------------
// Transfer evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDelta {
    pub id: String,
    pub baseline: f64,
    pub ablated: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEval {
    pub circuit: Vec<ComponentId>,
    /// Sorted by `delta` descending (ties by id).
    pub sequences: Vec<SequenceDelta>,
    pub mean_delta: f64,
}

impl TransferEval {
    pub fn most_degraded(&self, n: usize) -> &[SequenceDelta] {
        &self.sequences[..n.min(self.sequences.len())]
    }

    pub fn least_degraded(&self, n: usize) -> &[SequenceDelta] {
        &self.sequences[self.sequences.len().saturating_sub(n)..]
    }
}

/// Per-sequence next-token loss increase under the circuit's ablation.
pub fn transfer_eval<S: Scalar>(
    model: &Model<S>,
    circuit: &[ComponentId],
    corpus: &[(String, TokenSequence)],
    fc: &ForecastConfig,
) -> Result<TransferEval, CircuitError> {
    if corpus.is_empty() {
        return Err(CircuitError::Empty("corpus"));
    }
    for c in circuit {
        c.validate(&model.config)?;
    }
    let mask = mask_of(circuit);
    let none = AblationMask::none();
    let mut sequences = corpus
        .iter()
        .map(|(id, seq)| {
            let ex = Example::next_token(&seq.ids);
            let baseline = example_loss(model, &ex, fc, &none)?;
            let ablated = if mask.is_empty() { baseline } else { example_loss(model, &ex, fc, &mask)? };
            Ok(SequenceDelta { id: id.clone(), baseline, ablated, delta: ablated - baseline })
        })
        .collect::<Result<Vec<_>, CircuitError>>()?;
    sequences.sort_by(|a, b| b.delta.partial_cmp(&a.delta).unwrap_or(Ordering::Equal).then(a.id.cmp(&b.id)));
    let mean_delta = sequences.iter().map(|s| s.delta).sum::<f64>() / sequences.len() as f64;
    Ok(TransferEval { circuit: circuit.to_vec(), sequences, mean_delta })
}

// ----------------------------------------------------------------------------
// Constructed models

const CONSTRUCTED_POSITIONS: usize = 16;
const ATTN_SHARPNESS: f64 = 800.0;
const LOGIT_GAIN: f64 = 10.0;

fn blank_model(cfg: ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg).expect("valid constructed config");
    let p = &mut m.params;
    for t in [&mut p.tok_embed, &mut p.pos_embed, &mut p.head] {
        t.fill(0.0);
    }
    for l in &mut p.layers {
        for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w_in, &mut l.w_out] {
            t.fill(0.0);
        }
    }
    m
}

/// Positions on a half circle: `(cos θt, sin θt)` with `θ = π / positions`.
fn write_positions(pos_embed: &mut Matrix<f64>, col: usize) {
    let theta = std::f64::consts::PI / pos_embed.rows() as f64;
    for t in 0..pos_embed.rows() {
        pos_embed[(t, col)] = (theta * t as f64).cos();
        pos_embed[(t, col + 1)] = (theta * t as f64).sin();
    }
}

/// Wires head `h` of layer 0 to attend from `t` to `t − 1` and carry the
/// token one-hot (dims `0..vocab`) into `out_col..out_col + vocab`.
fn wire_previous_token_head(m: &mut Model<f64>, h: usize, pos_col: usize, out_col: usize, out_gain: f64) {
    let v = m.config.vocab_size;
    let off = h * m.config.head_dim();
    let theta = std::f64::consts::PI / CONSTRUCTED_POSITIONS as f64;
    let l = &mut m.params.layers[0];
    // q_t = β R(−θ) p_t = β p_{t−1}; k_s = p_s.
    l.wq[(pos_col, off)] = ATTN_SHARPNESS * theta.cos();
    l.wq[(pos_col, off + 1)] = -ATTN_SHARPNESS * theta.sin();
    l.wq[(pos_col + 1, off)] = ATTN_SHARPNESS * theta.sin();
    l.wq[(pos_col + 1, off + 1)] = ATTN_SHARPNESS * theta.cos();
    l.wk[(pos_col, off)] = 1.0;
    l.wk[(pos_col + 1, off + 1)] = 1.0;
    for j in 0..v {
        l.wv[(j, off + j)] = 1.0;
        l.wo[(off + j, out_col + j)] = out_gain;
    }
}

/// One-layer model whose head 0 copies the previous token into the logits
/// and whose head 1 has a zero output projection. A direct path predicts
/// the current token, so constant sequences do not need the head but
/// period-2 sequences do.
///
/// Layout: token one-hot `[0, V)`, position `[V, V+2)`, copy `[V+2, 2V+2)`.
pub fn copy_head_model(vocab: usize) -> Model<f64> {
    let d = 2 * vocab + 2;
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: d,
        n_heads: 2,
        d_mlp: 4,
        vocab_size: vocab,
        max_positions: CONSTRUCTED_POSITIONS,
        init_scale: 0.3,
        seed: 0,
    };
    let mut m = blank_model(cfg);
    for j in 0..vocab {
        m.params.tok_embed[(j, j)] = 1.0;
    }
    write_positions(&mut m.params.pos_embed, vocab);
    wire_previous_token_head(&mut m, 0, vocab, vocab + 2, 1.0);
    // Head 1 attends and reads values, but writes nothing.
    let off = m.config.head_dim();
    let l = &mut m.params.layers[0];
    for j in 0..vocab {
        l.wq[(j, off + j)] = 1.0;
        l.wk[(j, off + j)] = 1.0;
        l.wv[(j, off + j)] = 1.0;
    }
    for j in 0..vocab {
        m.params.head[(j, j)] = LOGIT_GAIN;
        m.params.head[(vocab + 2 + j, j)] = LOGIT_GAIN;
    }
    m
}

/// Two identical previous-token heads feed an MLP that only fires when both
/// contributions are present, so either ablation alone removes the whole
/// effect.
///
/// Layout: token `[0, V)`, position `[V, V+2)`, constant `V+2`, copy
/// `[V+3, 2V+3)`, prediction `[2V+3, 3V+3)`.
pub fn redundant_pair_model(vocab: usize) -> Model<f64> {
    let d = 3 * vocab + 3;
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: d,
        n_heads: 2,
        d_mlp: vocab,
        vocab_size: vocab,
        max_positions: CONSTRUCTED_POSITIONS,
        init_scale: 0.3,
        seed: 0,
    };
    let (pos, konst, copy, pred) = (vocab, vocab + 2, vocab + 3, 2 * vocab + 3);
    let mut m = blank_model(cfg);
    for j in 0..vocab {
        m.params.tok_embed[(j, j)] = 1.0;
    }
    write_positions(&mut m.params.pos_embed, pos);
    for t in 0..CONSTRUCTED_POSITIONS {
        m.params.pos_embed[(t, konst)] = 1.0;
    }
    // The embedding has norm √3, so normalized values carry √(d/3); scale
    // each head's write to one unit of the normalized constant.
    let kappa = (d as f64 / 3.0).sqrt();
    for h in 0..2 {
        wire_previous_token_head(&mut m, h, pos, copy, 1.0 / kappa);
    }
    // Hidden unit j: s·(copy_j − 1.5·const), positive only with both heads.
    let l = &mut m.params.layers[0];
    for j in 0..vocab {
        l.w_in[(copy + j, j)] = 20.0;
        l.w_in[(konst, j)] = -30.0;
        l.w_out[(j, pred + j)] = 0.25;
    }
    for j in 0..vocab {
        m.params.head[(j, j)] = LOGIT_GAIN;
        m.params.head[(pred + j, j)] = LOGIT_GAIN;
    }
    m
}

/// `a b a b …` sequences over all ordered token pairs.
pub fn alternating_sequences(vocab: usize, len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for a in 0..vocab as u32 {
        for b in 0..vocab as u32 {
            if a != b {
                out.push((0..len).map(|i| if i % 2 == 0 { a } else { b }).collect());
            }
        }
    }
    out
}

pub fn constant_sequences(vocab: usize, len: usize) -> Vec<Vec<u32>> {
    (0..vocab as u32).map(|a| vec![a; len]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn component_count_and_names() {
        let cfg = ModelConfig { n_layers: 3, n_heads: 4, ..ModelConfig::default() };
        let all = all_components(&cfg);
        assert_eq!(all.len(), 3 * (4 + 1));
        assert_eq!(all[0].name(), "L0H0");
        assert_eq!(all[4].name(), "MLP_L0");
        assert!(ComponentId::head(3, 0).validate(&cfg).is_err());
    }

    #[test]
    fn mask_is_order_free() {
        let a = [ComponentId::head(0, 1), ComponentId::mlp(1)];
        let b = [ComponentId::mlp(1), ComponentId::head(0, 1)];
        assert_eq!(mask_of(&a), mask_of(&b));
    }

    #[test]
    fn exact_ratios() {
        let r = |n, d| Ratio::new(n, d);
        assert_eq!(selectivity(r(575, 100), r(231, 100)), r(344, 100));
        let rho = superadditivity(r(1550, 100), &[r(450, 100), r(575, 100)]).unwrap();
        assert_eq!(rho, r(1550, 1025));
        assert!(is_superadditive(rho));
        assert_eq!(superadditivity(r(3, 1), &[r(3, 1)]), Some(r(1, 1)));
        assert_eq!(superadditivity(r(1, 1), &[r(-1, 1), r(1, 1)]), None);
    }
}
