//! `geometry`, `probe`, `retrieve`, `crosscoder` and `circuits`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tslab::circuits::{self, all_components, cumulative_sets, top_components, top_pairs, ComponentId};
use tslab::crosscoder::{self, rank_cross_domain, FeatureLabel};
use tslab::datagen::{generate_waveform, TimeSeriesWindow, WaveformKind, WaveformSpec};
use tslab::geometry::{erank_per_layer, linear_cka, pca_trajectory, phase_coherence, COHERENCE_EXCLUDE, ERANK_EXCLUDE};
use tslab::model::{AblationMask, ActivationTrace};
use tslab::numerics::{Matrix, SeededRng};
use tslab::probe::{ablation_2x2, probe_forward, retrieval_forecast, retrieval_summary, ProbeParams};
use tslab::tokenizer::{apply_stats, context_stats, TokenSequence};
use tslab::trainer::{Example, LossSpan};
use tslab::transfer::probes_from_windows;
use tslab::Transformer;

use super::data::{load_bank, load_corpus, load_windows, streams, Role};
use super::training::load_model;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::{encode_activations, fmt_f64, read_activation_header, read_activation_items, read_activations, CsvTable, RunDir};
use crate::report::{
    ABLATION_SCHEMA, CIRCUIT_TRANSFER_SCHEMA, COMPOSITION_SCHEMA, FAIR_TOP_K_SCHEMA, FEATURE_SCHEMA,
    FORECAST_EXAMPLE_SCHEMA, PROBE_CONDITIONS, RETRIEVAL_SCHEMA,
};

pub const ERANK_SCHEMA: &str = "erank_layers/v1";
pub const COHERENCE_SCHEMA: &str = "coherence/v1";
pub const PCA_SCHEMA: &str = "pca_trajectory/v1";
pub const PCA_VARIANCE_SCHEMA: &str = "pca_variance/v1";
pub const CKA_SCHEMA: &str = "cka/v1";
pub const PROBE_HISTORY_SCHEMA: &str = "probe_history/v1";
pub const COVERAGE_SCHEMA: &str = "probe_coverage/v1";
pub const MATCHES_SCHEMA: &str = "probe_matches/v1";
pub const DECODED_SCHEMA: &str = "probe_decoded/v1";
pub const RETRIEVAL_SCHEMA_ROWS: &str = "retrieval/v1";
pub const OVERLAY_SCHEMA: &str = "forecast_overlay/v1";
pub const CROSSCODER_HISTORY_SCHEMA: &str = "crosscoder_history/v1";
pub const SEQUENCE_DELTA_SCHEMA: &str = "sequence_delta/v1";

/// Decoded overlays written per probe run.
const DECODED_INPUTS: usize = 8;

fn trace(model: &Transformer, tokens: &[u32]) -> Result<ActivationTrace<f32>> {
    Ok(model.forward(tokens, &AblationMask::none(), true)?.trace.expect("trace captured"))
}

/// Run-directory name of a checkpoint, made unique by position.
fn labels(paths: &[PathBuf]) -> Vec<String> {
    let base: Vec<String> = paths
        .iter()
        .map(|p| {
            p.parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, b)| if base.iter().filter(|x| *x == b).count() > 1 { format!("{b}#{i}") } else { b.clone() })
        .collect()
}

// ----------------------------------------------------------------------------
// geometry

pub fn geometry(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, checkpoints: &[PathBuf]) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(CliError::Config("geometry needs at least one --checkpoint".into()));
    }
    let held: Vec<TimeSeriesWindow> = load_windows(run, data, Role::Heldout)?.into_iter().map(|(_, w)| w).collect();
    let tcfg = cfg.transfer_config();
    let probes = probes_from_windows(&tcfg, &held)?;
    let g = &cfg.geometry;
    let names = labels(checkpoints);
    let mut erank = CsvTable::new(ERANK_SCHEMA, &["checkpoint", "layer", "erank"]);
    let mut coh = CsvTable::new(COHERENCE_SCHEMA, &["checkpoint", "layer", "coherence", "one_minus_coherence"]);
    let mut pc_header = vec!["checkpoint".to_string(), "layer".into(), "position".into(), "phase".into()];
    pc_header.extend((1..=g.pca_components).map(|k| format!("pc{k}")));
    let pc_header: Vec<&str> = pc_header.iter().map(String::as_str).collect();
    let mut pca = CsvTable::new(PCA_SCHEMA, &pc_header);
    let mut var = CsvTable::new(PCA_VARIANCE_SCHEMA, &["checkpoint", "layer", "component", "fraction"]);
    let mut pooled: Vec<Vec<Matrix<f32>>> = Vec::new();

    for (i, path) in checkpoints.iter().enumerate() {
        let name = &names[i];
        let model = load_model(run, cfg, &format!("checkpoint/{name}"), path)?;
        let traces = probes.erank_inputs.iter().map(|t| trace(&model, t)).collect::<Result<Vec<_>>>()?;
        for (l, v) in erank_per_layer(&traces, ERANK_EXCLUDE)?.iter().enumerate() {
            erank.push(vec![name.clone(), (l + 1).to_string(), fmt_f64(*v)]);
        }
        pooled.push(
            (0..traces[0].hidden.len())
                .map(|l| {
                    let rows: Vec<Vec<f32>> =
                        traces.iter().flat_map(|t| (0..t.hidden[l].rows()).map(move |r| t.hidden[l].row(r).to_vec())).collect();
                    Matrix::from_rows(&rows).expect("equal widths")
                })
                .collect(),
        );
        let sine = trace(&model, &probes.sine)?;
        for (l, h) in sine.hidden.iter().enumerate() {
            let c = phase_coherence(h, g.coherence_period, COHERENCE_EXCLUDE)?;
            coh.push(vec![name.clone(), l.to_string(), fmt_f64(c.coherence), fmt_f64(c.one_minus)]);
        }
        for t in pca_trajectory(&sine, g.pca_components, g.coherence_period, COHERENCE_EXCLUDE)? {
            for (j, coords) in t.coords.iter().enumerate() {
                let mut row = vec![name.clone(), t.layer.to_string(), t.positions[j].to_string(), t.phase[j].to_string()];
                row.extend((0..g.pca_components).map(|k| coords.get(k).map_or_else(|| "---".into(), |v| fmt_f64(*v))));
                pca.push(row);
            }
            for (k, f) in t.variance_fractions.iter().enumerate() {
                var.push(vec![name.clone(), t.layer.to_string(), (k + 1).to_string(), fmt_f64(*f)]);
            }
        }
    }
    let mut cka = CsvTable::new(CKA_SCHEMA, &["a", "b", "layer", "cka"]);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            for l in 0..pooled[i].len() {
                let v = linear_cka(&pooled[i][l], &pooled[j][l])?;
                cka.push(vec![names[i].clone(), names[j].clone(), l.to_string(), fmt_f64(v)]);
            }
        }
    }
    run.write_csv("erank.csv", &erank)?;
    run.write_csv("coherence.csv", &coh)?;
    run.write_csv("pca.csv", &pca)?;
    run.write_csv("pca_variance.csv", &var)?;
    run.write_csv("cka.csv", &cka)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedProbe {
    pub condition: String,
    pub std_floor: f64,
    pub params: ProbeParams,
}

fn features(model: &Transformer, inputs: &[Vec<u32>]) -> Result<Vec<Matrix<f64>>> {
    inputs.iter().map(|t| Ok(trace(model, t)?.concat_hidden().cast())).collect()
}

fn stack(features: &[Matrix<f64>]) -> Matrix<f64> {
    let cols = features[0].cols();
    let data: Vec<f64> = features.iter().flat_map(|m| m.data().iter().copied()).collect();
    Matrix::new(data.len() / cols, cols, data).expect("consistent widths")
}

fn fmt6(x: Option<f64>) -> String {
    x.map_or_else(|| "---".into(), |v| format!("{v:.6}"))
}

pub fn probe(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, checkpoint: &Path) -> Result<()> {
    let p = &cfg.probe;
    let t = cfg.datagen.bank.length;
    let bank = load_bank(run, data)?;
    let corpus = load_corpus(run, data)?;
    let text: Vec<Vec<u32>> = corpus.iter().filter(|r| r.train).take(p.inputs).map(|r| r.tokens[..t].to_vec()).collect();
    if text.len() < p.inputs {
        return Err(CliError::Config(format!("probe.inputs {} exceeds {} training sequences", p.inputs, text.len())));
    }
    let mut rng = SeededRng::new(cfg.seed).derive(streams::RANDOM_TOKENS);
    let v = cfg.datagen.corpus.vocab_size;
    let random: Vec<Vec<u32>> = (0..p.inputs).map(|_| (0..t).map(|_| rng.below(v) as u32).collect()).collect();

    let pretrained = load_model(run, cfg, "checkpoint", checkpoint)?;
    let fresh = Transformer::init(cfg.model.clone())?;
    let text_pt = features(&pretrained, &text)?;
    let cells = vec![
        (PROBE_CONDITIONS[0].to_string(), text_pt.clone()),
        (PROBE_CONDITIONS[1].to_string(), features(&fresh, &text)?),
        (PROBE_CONDITIONS[2].to_string(), features(&pretrained, &random)?),
        (PROBE_CONDITIONS[3].to_string(), features(&fresh, &random)?),
    ];
    let results = ablation_2x2(&cells, &bank, &p.em, &p.ks)?;

    let mut hist = CsvTable::new(PROBE_HISTORY_SCHEMA, &["condition", "epoch", "loss", "mse", "penalty"]);
    let mut cov = CsvTable::new(COVERAGE_SCHEMA, &["condition", "inputs", "distinct", "fraction", "mean_mse"]);
    for cell in &results {
        for e in &cell.fit.history {
            hist.push(vec![cell.label.clone(), e.epoch.to_string(), fmt_f64(e.loss), fmt_f64(e.mse), fmt_f64(e.penalty)]);
        }
        let c = &cell.coverage;
        cov.push(vec![cell.label.clone(), c.inputs.to_string(), c.distinct.to_string(), fmt_f64(c.fraction), fmt_f64(c.mean_mse)]);
    }
    let mut header = vec!["k"];
    header.extend(PROBE_CONDITIONS);
    let mut top = CsvTable::new(FAIR_TOP_K_SCHEMA, &header);
    for (i, &k) in p.ks.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(results.iter().map(|c| fmt6(c.coverage.fair_top_k[i].1)));
        top.push(row);
    }
    run.write_csv("probe_history.csv", &hist)?;
    run.write_csv("coverage.csv", &cov)?;
    run.write_csv("fair_top_k.csv", &top)?;

    let best = &results[0];
    let mut matches = CsvTable::new(MATCHES_SCHEMA, &["input", "bank_index", "bank_id", "mse"]);
    for (i, &(j, mse)) in best.coverage.assignments.iter().enumerate() {
        matches.push(vec![corpus[i].id.clone(), j.to_string(), bank.ids[j].clone(), fmt_f64(mse)]);
    }
    run.write_csv("matches.csv", &matches)?;
    let outputs = probe_forward(&best.fit.params, &text_pt[..DECODED_INPUTS.min(text_pt.len())], p.em.std_floor)?;
    let mut dec = CsvTable::new(DECODED_SCHEMA, &["input", "position", "probe", "matched"]);
    for (i, o) in outputs.iter().enumerate() {
        let j = best.coverage.assignments[i].0;
        for (pos, (a, b)) in o.values.iter().zip(&bank.windows[j]).enumerate() {
            dec.push(vec![corpus[i].id.clone(), pos.to_string(), fmt_f64(*a), fmt_f64(*b)]);
        }
    }
    run.write_csv("decoded.csv", &dec)?;
    let dims = [text_pt.len(), t, text_pt[0].cols()];
    run.write("features_text_pt.actd", &encode_activations(&stack(&text_pt), &dims))?;
    run.write_json(
        "probe.json",
        &SavedProbe { condition: best.label.clone(), std_floor: p.em.std_floor, params: best.fit.params.clone() },
    )?;
    Ok(())
}

// ----------------------------------------------------------------------------
// retrieve

pub fn retrieve(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, probe_dir: &Path) -> Result<()> {
    let json_path = probe_dir.join("probe.json");
    let saved: SavedProbe = serde_json::from_slice(&run.input("probe/probe.json", &json_path)?)
        .map_err(|e| CliError::artifact(&json_path, e.to_string()))?;
    let dump = probe_dir.join("features_text_pt.actd");
    run.input("probe/features_text_pt.actd", &dump)?;
    let header = read_activation_header(&dump)?;
    if header.dims.len() != 3 {
        return Err(CliError::artifact(&dump, "expected items × positions × d"));
    }
    let feats = (0..header.items()).map(|i| read_activation_items(&dump, i, 1)).collect::<Result<Vec<_>>>()?;
    let projections: Vec<Vec<f64>> =
        probe_forward(&saved.params, &feats, saved.std_floor)?.into_iter().map(|o| o.values).collect();

    let split = cfg.probe.retrieval_split;
    let queries = load_windows(run, data, Role::Query)?;
    let mut rows = CsvTable::new(RETRIEVAL_SCHEMA_ROWS, &["query", "source", "index", "forecast_mse", "baseline_mse"]);
    let mut results = Vec::with_capacity(queries.len());
    for (id, w) in &queries {
        let (mean, std) = context_stats(&w.context)?;
        let q = apply_stats(&w.full(), mean, std);
        let r = retrieval_forecast(&q, &projections, split)?;
        rows.push(vec![id.clone(), w.source_id.clone(), r.index.to_string(), fmt_f64(r.forecast_mse), fmt_f64(r.baseline_mse)]);
        results.push((q, r));
    }
    run.write_csv("retrieval.csv", &rows)?;
    let s = retrieval_summary(&results.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    let mut sum = CsvTable::new(RETRIEVAL_SCHEMA, &["retrieval_mse", "last_value_mse", "win_rate", "queries"]);
    sum.push(vec![fmt6(Some(s.retrieval_mse)), fmt6(Some(s.last_value_mse)), fmt6(Some(s.win_rate)), s.queries.to_string()]);
    run.write_csv("retrieval_summary.csv", &sum)?;

    // Largest improvement over the last-value baseline, first on ties.
    let mut best = 0;
    for (i, (_, r)) in results.iter().enumerate() {
        let gain = |r: &tslab::probe::RetrievalForecast| r.baseline_mse - r.forecast_mse;
        if gain(r) > gain(&results[best].1) {
            best = i;
        }
    }
    let (q, r) = &results[best];
    let mut ex = CsvTable::new(FORECAST_EXAMPLE_SCHEMA, &["query", "retrieval_mse", "baseline_mse"]);
    ex.push(vec![queries[best].0.clone(), fmt6(Some(r.forecast_mse)), fmt6(Some(r.baseline_mse))]);
    run.write_csv("forecast_example.csv", &ex)?;
    let mut ov = CsvTable::new(OVERLAY_SCHEMA, &["position", "truth", "retrieval", "last_value"]);
    for (pos, v) in q.iter().enumerate() {
        let (f, b) = if pos < split {
            ("---".into(), "---".into())
        } else {
            (fmt_f64(r.forecast[pos - split]), fmt_f64(r.baseline[pos - split]))
        };
        ov.push(vec![pos.to_string(), fmt_f64(*v), f, b]);
    }
    run.write_csv("overlay.csv", &ov)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// crosscoder

#[derive(Serialize)]
struct Exemplar {
    window: String,
    position: usize,
}

#[derive(Serialize)]
struct FeatureReport {
    feature: usize,
    label: &'static str,
    rate_a: f64,
    rate_b: f64,
    exemplars_base: Vec<Exemplar>,
    exemplars_finetuned: Vec<Exemplar>,
}

#[derive(Serialize)]
struct CrosscoderReport {
    layer: usize,
    rows: usize,
    initial_mse: f64,
    final_mse: f64,
    dead_fraction: f64,
    stopped_early: bool,
    label_counts: BTreeMap<&'static str, usize>,
    top_features: Vec<FeatureReport>,
}

pub fn crosscoder(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, base: &Path, finetuned: &Path) -> Result<()> {
    let c = &cfg.crosscoder;
    let mut pool = load_windows(run, data, Role::Finetune)?;
    SeededRng::new(cfg.seed).derive(streams::CROSSCODER_WINDOWS).shuffle(&mut pool);
    pool.truncate(c.windows);
    let fc = cfg.forecast_config();
    let inputs: Vec<Vec<u32>> = pool.iter().map(|(_, w)| Example::from_window(w, &fc, LossSpan::Full).input).collect();
    let positions = inputs[0].len() - ERANK_EXCLUDE;
    let index: Vec<(usize, usize)> =
        (0..inputs.len()).flat_map(|i| (ERANK_EXCLUDE..inputs[i].len()).map(move |p| (i, p))).collect();

    let mut paths = Vec::new();
    for (role, name, path) in [("base", "acts_base.actd", base), ("finetuned", "acts_finetuned.actd", finetuned)] {
        let model = load_model(run, cfg, role, path)?;
        let rows: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| Ok(trace(&model, t)?.hidden[c.layer].cast::<f64>()))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .flat_map(|h| (ERANK_EXCLUDE..h.rows()).map(move |r| h.row(r).to_vec()))
            .collect();
        let m = Matrix::from_rows(&rows).expect("equal widths");
        paths.push(run.write(name, &encode_activations(&m, &[inputs.len(), positions, m.cols()]))?);
    }
    let a = read_activations(&paths[0])?;
    let b = read_activations(&paths[1])?;
    let fit = crosscoder::train(&c.train, &a, &b)?;
    let stats = crosscoder::analyze(&fit.params, &a, &b, c.threshold, c.top_n)?;

    let mut hist = CsvTable::new(
        CROSSCODER_HISTORY_SCHEMA,
        &["step", "loss", "mse_a", "mse_b", "aux", "dead_fraction", "lr"],
    );
    for r in &fit.history {
        hist.push(vec![
            r.step.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.mse_a),
            fmt_f64(r.mse_b),
            fmt_f64(r.aux),
            fmt_f64(r.dead_fraction),
            fmt_f64(r.lr),
        ]);
    }
    run.write_csv("crosscoder_history.csv", &hist)?;
    let mut feats = CsvTable::new(FEATURE_SCHEMA, &["feature", "rate_a", "rate_b", "label", "balance"]);
    for s in &stats {
        feats.push(vec![s.feature.to_string(), fmt6(Some(s.rate_a)), fmt6(Some(s.rate_b)), s.label.name().into(), fmt6(Some(s.balance))]);
    }
    run.write_csv("features.csv", &feats)?;

    let exemplars = |rows: &[usize]| -> Vec<Exemplar> {
        rows.iter().map(|&r| Exemplar { window: pool[index[r].0].0.clone(), position: index[r].1 }).collect()
    };
    let mut label_counts = BTreeMap::new();
    for l in [FeatureLabel::AOnly, FeatureLabel::BOnly, FeatureLabel::AB, FeatureLabel::Dead] {
        label_counts.insert(l.name(), stats.iter().filter(|s| s.label == l).count());
    }
    let report = CrosscoderReport {
        layer: c.layer,
        rows: a.rows(),
        initial_mse: fit.initial_mse,
        final_mse: fit.final_mse,
        dead_fraction: fit.final_dead_fraction(),
        stopped_early: fit.stopped_early,
        label_counts,
        top_features: rank_cross_domain(&stats)
            .into_iter()
            .take(c.top_n)
            .map(|s| FeatureReport {
                feature: s.feature,
                label: s.label.name(),
                rate_a: s.rate_a,
                rate_b: s.rate_b,
                exemplars_base: exemplars(&s.top_a),
                exemplars_finetuned: exemplars(&s.top_b),
            })
            .collect(),
    };
    run.write_json("crosscoder.json", &report)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// circuits

fn waveform_examples(cfg: &ExperimentConfig, kinds: &[WaveformKind], stream: u64) -> Result<Vec<Example>> {
    let d = &cfg.datagen;
    let k = &cfg.circuits;
    let root = SeededRng::new(cfg.seed).derive(streams::CIRCUIT_WINDOWS).derive(stream);
    let fc = cfg.forecast_config();
    let mut out = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for i in 0..k.windows_per_kind {
            let spec = WaveformSpec {
                noise_std: d.bank.noise_std,
                random_phase: true,
                ..WaveformSpec::new(kind, k.period, d.context_len + d.horizon, root.derive((ki * 1_000 + i) as u64).seed())
            };
            let x = generate_waveform(&spec)?;
            let w = TimeSeriesWindow::new(x[..d.context_len].to_vec(), x[d.context_len..].to_vec(), kind.name())
                .ok_or_else(|| CliError::Failed(format!("{} window has no finite context", kind.name())))?;
            out.push(Example::from_window(&w, &fc, cfg.trainer.loss_span));
        }
    }
    Ok(out)
}

fn set_name(set: &[ComponentId]) -> String {
    set.iter().map(ComponentId::name).collect::<Vec<_>>().join("+")
}

#[derive(Serialize)]
struct CircuitSummary {
    baseline_periodic: f64,
    baseline_control: f64,
    components: usize,
    top: Vec<String>,
    flagged: Vec<(String, String, usize)>,
    superadditive_sets: Vec<String>,
    mean_delta: f64,
}

pub fn circuits(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, checkpoint: &Path) -> Result<()> {
    let model = load_model(run, cfg, "checkpoint", checkpoint)?;
    let fc = cfg.forecast_config();
    let periodic = waveform_examples(cfg, &WaveformKind::PERIODIC, 0)?;
    let control = waveform_examples(cfg, &WaveformKind::CONTROL, 1)?;
    let report = circuits::sweep(&model, &periodic, &control, &fc)?;
    debug_assert_eq!(report.components.len(), all_components(&cfg.model).len());
    let mut abl = CsvTable::new(ABLATION_SCHEMA, &["component", "delta_periodic", "delta_control", "selectivity"]);
    for r in &report.components {
        abl.push(vec![r.component.name(), fmt_f64(r.delta_periodic), fmt_f64(r.delta_control), fmt_f64(r.selectivity)]);
    }
    run.write_csv("ablation.csv", &abl)?;

    let n = cfg.circuits.top_n;
    let mut sets = top_pairs(&report, n);
    for s in cumulative_sets(&report, n) {
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    let comps = circuits::compose(&model, &sets, &report, &periodic, &control, &fc)?;
    let mut comp = CsvTable::new(
        COMPOSITION_SCHEMA,
        &["set", "combined", "sum_individual", "rho", "superadditive", "combined_control"],
    );
    for c in &comps {
        comp.push(vec![
            set_name(&c.components),
            fmt_f64(c.combined_periodic),
            fmt_f64(c.sum_individual),
            c.rho.map_or_else(|| "---".into(), fmt_f64),
            c.superadditive.to_string(),
            fmt_f64(c.combined_control),
        ]);
    }
    run.write_csv("composition.csv", &comp)?;

    let corpus = load_corpus(run, data)?;
    let seqs: Vec<(String, TokenSequence)> = corpus
        .iter()
        .filter(|r| r.train)
        .take(cfg.circuits.corpus_sequences)
        .map(|r| (r.id.clone(), TokenSequence::new(r.tokens.clone())))
        .collect();
    let circuit = top_components(&report, n);
    let eval = circuits::transfer_eval(&model, &circuit, &seqs, &fc)?;
    let mut deltas = CsvTable::new(SEQUENCE_DELTA_SCHEMA, &["id", "baseline", "ablated", "delta"]);
    for s in &eval.sequences {
        deltas.push(vec![s.id.clone(), fmt_f64(s.baseline), fmt_f64(s.ablated), fmt_f64(s.delta)]);
    }
    run.write_csv("sequence_deltas.csv", &deltas)?;
    let mut ct = CsvTable::new(CIRCUIT_TRANSFER_SCHEMA, &["mean_delta", "circuit"]);
    ct.push(vec![fmt6(Some(eval.mean_delta)), set_name(&circuit)]);
    run.write_csv("circuit_transfer.csv", &ct)?;
    run.write_json(
        "circuits.json",
        &CircuitSummary {
            baseline_periodic: report.baseline_periodic,
            baseline_control: report.baseline_control,
            components: report.components.len(),
            top: circuit.iter().map(ComponentId::name).collect(),
            flagged: report.flagged.iter().map(|(c, s, w)| (c.name(), s.clone(), *w)).collect(),
            superadditive_sets: comps.iter().filter(|c| c.superadditive).map(|c| set_name(&c.components)).collect(),
            mean_delta: eval.mean_delta,
        },
    )?;
    Ok(())
}
