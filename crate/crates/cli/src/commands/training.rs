//! `pretrain`, `finetune`, `evaluate` and `transfer`.

use std::path::Path;

use serde::Serialize;
use tslab::datagen::TimeSeriesWindow;
use tslab::forecaster::rollout;
use tslab::metrics::{aggregate, evaluate_forecast, EvalRecord, METRIC_NAMES};
use tslab::model::Model;
use tslab::trainer::{pretrain_toy_language, train, Example, StepRecord, TrainError};
use tslab::transfer::{self, measure, probes_from_windows, CheckpointStats, InitRun, TransferVerdict};
use tslab::Transformer;

use super::data::{load_corpus, load_windows, Role};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::{fmt_f64, fmt_opt, CsvTable, RunDir};
use crate::report::TRANSFER_SCHEMA;

pub const TRAIN_LOSS_SCHEMA: &str = "train_loss/v1";
pub const CHECKPOINT_STATS_SCHEMA: &str = "checkpoint_stats/v1";
pub const ERANK_STEPS_SCHEMA: &str = "erank_steps/v1";
pub const METRICS_SCHEMA: &str = "forecast_metrics/v1";
pub const METRIC_SUMMARY_SCHEMA: &str = "forecast_metric_summary/v1";
pub const TRANSFER_CURVES_SCHEMA: &str = "transfer_curves/v1";
pub const VERDICT_SCHEMA: &str = "transfer_verdict/v1";

pub fn loss_table(steps: &[StepRecord]) -> CsvTable {
    let mut t = CsvTable::new(TRAIN_LOSS_SCHEMA, &["step", "train_loss", "lr", "grad_norm"]);
    for s in steps {
        t.push(vec![s.step.to_string(), fmt_f64(s.train_loss), fmt_f64(s.lr), fmt_f64(s.grad_norm)]);
    }
    t
}

fn stats_tables(stats: &[CheckpointStats]) -> (CsvTable, CsvTable) {
    let mut a = CsvTable::new(CHECKPOINT_STATS_SCHEMA, &["step", "alignment", "mean_erank", "one_minus_coherence", "crps"]);
    let mut e = CsvTable::new(ERANK_STEPS_SCHEMA, &["step", "layer", "erank"]);
    for s in stats {
        a.push(vec![
            s.step.to_string(),
            fmt_f64(s.alignment),
            fmt_f64(s.mean_erank),
            fmt_f64(s.one_minus_coherence),
            fmt_f64(s.crps),
        ]);
        for (l, v) in s.erank.iter().enumerate() {
            e.push(vec![s.step.to_string(), (l + 1).to_string(), fmt_f64(*v)]);
        }
    }
    (a, e)
}

/// Architecture fields must agree; seed and init scale may differ.
fn check_architecture(model: &Transformer, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let (a, b) = (&model.config, &cfg.model);
    let same = (a.n_layers, a.d_model, a.n_heads, a.d_mlp, a.vocab_size, a.max_positions)
        == (b.n_layers, b.d_model, b.n_heads, b.d_mlp, b.vocab_size, b.max_positions);
    if !same {
        return Err(CliError::Config(format!("checkpoint {} architecture differs from [model]", path.display())));
    }
    Ok(())
}

pub fn load_model(run: &mut RunDir, cfg: &ExperimentConfig, role: &str, path: &Path) -> Result<Transformer> {
    let model = run.input_checkpoint(role, path)?;
    check_architecture(&model, cfg, path)?;
    Ok(model)
}

// ----------------------------------------------------------------------------
// pretrain

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    final_train_loss: Option<f64>,
    heldout_loss: f64,
    unigram_entropy: f64,
}

pub fn pretrain(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path) -> Result<()> {
    let corpus = load_corpus(run, data)?;
    let (train_rows, held_rows): (Vec<_>, Vec<_>) = corpus.iter().partition(|r| r.train);
    let train_seqs: Vec<_> = train_rows.iter().map(|r| r.sequence()).collect();
    let held: Vec<_> = held_rows.iter().map(|r| r.sequence()).collect();
    let mut model = Transformer::init(cfg.model.clone())?;
    let report = pretrain_toy_language(&mut model, &train_seqs, &held, &cfg.trainer.pretrain, &mut |_, _| Ok(()))?;
    run.write_checkpoint("model.ckpt", &model, cfg)?;
    run.write_csv("train_loss.csv", &loss_table(&report.train.steps))?;
    run.write_json(
        "pretrain.json",
        &PretrainSummary {
            steps: report.train.steps.len(),
            final_train_loss: report.train.steps.last().map(|s| s.train_loss),
            heldout_loss: report.heldout_loss,
            unigram_entropy: report.unigram_entropy,
        },
    )?;
    Ok(())
}

// ----------------------------------------------------------------------------
// finetune

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    init: &'a str,
    regime: &'a str,
    trainable: Vec<String>,
    checkpoints: Vec<usize>,
    final_crps: Option<f64>,
}

pub fn finetune(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, init: Option<&Path>) -> Result<()> {
    let mut model = match init {
        Some(p) => load_model(run, cfg, "init", p)?,
        None => Model::init(cfg.model.clone())?,
    };
    let pool: Vec<Example> = load_windows(run, data, Role::Finetune)?
        .iter()
        .map(|(_, w)| Example::from_window(w, &cfg.forecast_config(), cfg.trainer.loss_span))
        .collect();
    let held: Vec<TimeSeriesWindow> = load_windows(run, data, Role::Heldout)?.into_iter().map(|(_, w)| w).collect();
    let tcfg = cfg.transfer_config();
    let probes = probes_from_windows(&tcfg, &held)?;
    let mut stats = Vec::new();
    let mut failure: Option<CliError> = None;
    let result = train(&mut model, &cfg.trainer.regime, &cfg.trainer.finetune, &tcfg.forecast, &pool, &mut |step, m| {
        match measure(m, &tcfg, &probes, step) {
            Ok(s) => {
                stats.push(s);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e.into());
                Err(TrainError::Callback(msg))
            }
        }
    });
    let report = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    run.write_checkpoint("model.ckpt", &model, cfg)?;
    run.write_csv("train_loss.csv", &loss_table(&report.steps))?;
    let (align, erank) = stats_tables(&stats);
    run.write_csv("alignment.csv", &align)?;
    run.write_csv("erank_steps.csv", &erank)?;
    run.write_json(
        "finetune.json",
        &FinetuneSummary {
            init: if init.is_some() { "pretrained" } else { "random" },
            regime: cfg.trainer.regime.kind.name(),
            trainable: cfg.trainer.regime.trainable(&model.params),
            checkpoints: report.checkpoints.clone(),
            final_crps: stats.last().map(|s| s.crps),
        },
    )?;
    Ok(())
}

// ----------------------------------------------------------------------------
// evaluate

/// Last finite context value (the naive forecast origin).
fn last_finite(x: &[f64]) -> f64 {
    x.iter().rev().copied().find(|v| v.is_finite()).unwrap_or(0.0)
}

pub fn evaluate(cfg: &ExperimentConfig, run: &mut RunDir, data: &Path, checkpoint: &Path) -> Result<()> {
    let model = load_model(run, cfg, "checkpoint", checkpoint)?;
    let held = load_windows(run, data, Role::Heldout)?;
    let fc = cfg.forecast_config();
    let mut header = vec!["window", "source"];
    header.extend(METRIC_NAMES);
    let mut per = CsvTable::new(METRICS_SCHEMA, &header);
    let mut records: Vec<EvalRecord> = Vec::new();
    for (id, w) in held.iter().take(cfg.datagen.eval_windows) {
        let f = rollout(&model, &fc, &w.context, w.target.len())?;
        let rec = evaluate_forecast(&f, &w.target, cfg.metrics.seasonality, last_finite(&w.context))?;
        let mut row = vec![id.clone(), w.source_id.clone()];
        row.extend(METRIC_NAMES.iter().map(|m| fmt_opt(rec.get(m))));
        per.push(row);
        records.push(rec);
    }
    run.write_csv("metrics.csv", &per)?;
    let mut sum = CsvTable::new(METRIC_SUMMARY_SCHEMA, &["metric", "mean", "defined", "undefined"]);
    for s in aggregate(&records)? {
        sum.push(vec![s.name, fmt_opt(s.mean), s.defined.to_string(), s.undefined.to_string()]);
    }
    run.write_csv("metrics_summary.csv", &sum)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// transfer

fn curve_rows(t: &mut CsvTable, seed: u64, run: &InitRun) {
    for s in &run.checkpoints {
        t.push(vec![
            seed.to_string(),
            run.label.clone(),
            s.step.to_string(),
            fmt_f64(s.alignment),
            fmt_f64(s.mean_erank),
            fmt_f64(s.one_minus_coherence),
            fmt_f64(s.crps),
        ]);
    }
}

pub fn transfer(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Vec<TransferVerdict>> {
    let tcfg = cfg.transfer_config();
    let regime = cfg.trainer.regime.kind.name();
    let mut curves = CsvTable::new(
        TRANSFER_CURVES_SCHEMA,
        &["seed", "init", "step", "alignment", "mean_erank", "one_minus_coherence", "crps"],
    );
    let mut verdicts = CsvTable::new(
        VERDICT_SCHEMA,
        &[
            "seed",
            "alignment_pretrained",
            "alignment_random",
            "alignment_holds",
            "transfer_holds",
            "erank_holds",
            "coherence_pretrained",
            "coherence_random",
            "coherence_holds",
            "holds",
        ],
    );
    let mut dt = CsvTable::new(TRANSFER_SCHEMA, &["regime", "seed", "level", "d_t", "difference"]);
    let mut out = Vec::new();
    for &seed in &tcfg.seeds {
        let r = transfer::run_seed::<f32>(&tcfg, seed)?;
        curve_rows(&mut curves, seed, &r.pretrained);
        curve_rows(&mut curves, seed, &r.random);
        let v = transfer::verdict(&r)?;
        verdicts.push(vec![
            seed.to_string(),
            fmt_f64(v.alignment.0),
            fmt_f64(v.alignment.1),
            v.alignment_holds.to_string(),
            v.transfer_holds.to_string(),
            v.erank_holds.to_string(),
            fmt_f64(v.coherence.0),
            fmt_f64(v.coherence.1),
            v.coherence_holds.to_string(),
            v.holds().to_string(),
        ]);
        if let Some(e) = &v.transfer {
            dt.push(vec![regime.into(), seed.to_string(), fmt_f64(e.level), fmt_f64(e.ratio), fmt_f64(e.difference)]);
        }
        out.push(v);
    }
    run.write_csv("transfer.csv", &curves)?;
    run.write_csv("verdict.csv", &verdicts)?;
    run.write_csv("effective_transfer.csv", &dt)?;
    run.write_json("transfer.json", &out)?;
    Ok(out)
}
