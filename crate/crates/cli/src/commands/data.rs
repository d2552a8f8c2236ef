//! `datagen` and the readers for its run directory.

use std::path::Path;

use serde::Serialize;
use tslab::datagen::{
    build_bank, generate_toy_corpus, CorpusSequence, SegmentKind, SeriesBank, TimeSeriesWindow, WaveformSpec,
};
use tslab::numerics::{Matrix, SeededRng};
use tslab::tokenizer::TokenSequence;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::{encode_activations, read_activations, CsvTable, RunDir};

pub const CORPUS_SCHEMA: &str = "corpus/v1";
pub const WINDOWS_SCHEMA: &str = "windows/v1";
pub const BANK_SCHEMA: &str = "bank/v1";

/// Sub-streams of the global seed.
pub(crate) mod streams {
    pub const FINETUNE: u64 = 0;
    pub const HELDOUT: u64 = 1;
    pub const HELDOUT_ORDER: u64 = 2;
    pub const BANK: u64 = 3;
    pub const QUERIES: u64 = 5;
    pub const QUERY_ORDER: u64 = 6;
    pub const RANDOM_TOKENS: u64 = 7;
    pub const CROSSCODER_WINDOWS: u64 = 8;
    pub const CIRCUIT_WINDOWS: u64 = 9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Finetune,
    Heldout,
    Query,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Finetune => "finetune",
            Role::Heldout => "heldout",
            Role::Query => "query",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Role::Finetune, Role::Heldout, Role::Query].into_iter().find(|r| r.name() == s)
    }
}

fn segment_name(k: SegmentKind) -> &'static str {
    match k {
        SegmentKind::Repeat => "repeat",
        SegmentKind::Periodic => "periodic",
        SegmentKind::Trend => "trend",
        SegmentKind::Random => "random",
    }
}

/// Segment kind covering the most positions (first on ties).
fn dominant(seq: &CorpusSequence) -> &'static str {
    let kinds = [SegmentKind::Repeat, SegmentKind::Periodic, SegmentKind::Trend, SegmentKind::Random];
    let total = |k: SegmentKind| seq.segments.iter().filter(|s| s.0 == k).map(|s| s.1).sum::<usize>();
    let mut best = kinds[0];
    for k in kinds {
        if total(k) > total(best) {
            best = k;
        }
    }
    segment_name(best)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| crate::io::fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn split_values(s: &str, path: &Path) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| CliError::artifact(path, format!("bad value {v:?}"))))
        .collect()
}

/// `windows` shuffled with `seed`, truncated to `n`.
fn shuffled(mut windows: Vec<TimeSeriesWindow>, seed: u64, n: usize, what: &str) -> Result<Vec<TimeSeriesWindow>> {
    if windows.len() < n {
        return Err(CliError::Config(format!("mixture yields {} {what} windows, need {n}", windows.len())));
    }
    SeededRng::new(seed).shuffle(&mut windows);
    windows.truncate(n);
    Ok(windows)
}

fn bank_specs(cfg: &ExperimentConfig, root: &SeededRng) -> Vec<WaveformSpec> {
    let b = &cfg.datagen.bank;
    let mut specs = Vec::new();
    for &kind in &b.kinds {
        let periods: &[usize] = if kind.effective_period(2).is_some() { &b.periods } else { &b.periods[..1] };
        for &p in periods {
            let seed = root.derive(specs.len() as u64).seed();
            specs.push(WaveformSpec {
                noise_std: b.noise_std,
                random_phase: true,
                ..WaveformSpec::new(kind, p, b.length, seed)
            });
        }
    }
    specs
}

#[derive(Serialize)]
struct DatagenSummary {
    train_sequences: usize,
    heldout_sequences: usize,
    finetune_windows: usize,
    heldout_windows: usize,
    query_windows: usize,
    bank_windows: usize,
    bank_length: usize,
}

pub fn datagen(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let d = &cfg.datagen;
    let root = SeededRng::new(cfg.seed);
    let corpus = generate_toy_corpus(&d.corpus, d.pretrain_sequences + d.heldout_sequences)?;
    let len = d.corpus.sequence_length;
    let tokens = Matrix::from_fn(corpus.len(), len, |i, j| corpus[i].tokens.ids[j] as f64);
    run.write("corpus.actd", &encode_activations(&tokens, &[corpus.len(), len]))?;
    let mut table = CsvTable::new(CORPUS_SCHEMA, &["sequence", "split", "dominant"]);
    for (i, seq) in corpus.iter().enumerate() {
        let split = if i < d.pretrain_sequences { "train" } else { "heldout" };
        table.push(vec![i.to_string(), split.into(), dominant(seq).into()]);
    }
    run.write_csv("corpus.csv", &table)?;

    let (c, h) = (d.context_len, d.horizon);
    let finetune = d.mixture.windows(root.derive(streams::FINETUNE).seed(), c, h)?;
    let held_n = d.eval_windows + cfg.geometry.alignment_samples.max(cfg.geometry.erank_windows);
    let held = d.mixture.windows(root.derive(streams::HELDOUT).seed(), c, h)?;
    let held = shuffled(held, root.derive(streams::HELDOUT_ORDER).seed(), held_n, "held-out")?;
    let split = cfg.probe.retrieval_split;
    let queries = d.mixture.windows(root.derive(streams::QUERIES).seed(), split, d.bank.length - split)?;
    let queries =
        shuffled(queries, root.derive(streams::QUERY_ORDER).seed(), cfg.probe.retrieval_queries, "query")?;
    let mut table = CsvTable::new(WINDOWS_SCHEMA, &["window", "source", "role", "context", "target"]);
    for (role, set) in [(Role::Finetune, &finetune), (Role::Heldout, &held), (Role::Query, &queries)] {
        for (i, w) in set.iter().enumerate() {
            table.push(vec![
                format!("{}-{i:05}", role.name()),
                w.source_id.clone(),
                role.name().into(),
                join(&w.context),
                join(&w.target),
            ]);
        }
    }
    run.write_csv("windows.csv", &table)?;

    let bank = build_bank(&bank_specs(cfg, &root.derive(streams::BANK)), d.bank.windows, d.bank.length)?;
    let m = Matrix::from_fn(bank.len(), bank.window_len(), |i, j| bank.windows[i][j]);
    run.write("bank.actd", &encode_activations(&m, &[bank.len(), bank.window_len()]))?;
    let mut table = CsvTable::new(BANK_SCHEMA, &["index", "id"]);
    for (i, id) in bank.ids.iter().enumerate() {
        table.push(vec![i.to_string(), id.clone()]);
    }
    run.write_csv("bank.csv", &table)?;

    run.write_json(
        "datagen.json",
        &DatagenSummary {
            train_sequences: d.pretrain_sequences,
            heldout_sequences: d.heldout_sequences,
            finetune_windows: finetune.len(),
            heldout_windows: held.len(),
            query_windows: queries.len(),
            bank_windows: bank.len(),
            bank_length: bank.window_len(),
        },
    )?;
    Ok(())
}

// ----------------------------------------------------------------------------
// Readers

#[derive(Debug, Clone)]
pub struct CorpusRow {
    pub id: String,
    pub train: bool,
    pub tokens: Vec<u32>,
}

impl CorpusRow {
    pub fn sequence(&self) -> CorpusSequence {
        CorpusSequence { tokens: TokenSequence::new(self.tokens.clone()), segments: Vec::new() }
    }
}

pub fn load_corpus(run: &mut RunDir, data: &Path) -> Result<Vec<CorpusRow>> {
    let meta_path = data.join("corpus.csv");
    let meta = run.input_csv("data/corpus.csv", &meta_path)?;
    let dump = data.join("corpus.actd");
    run.input("data/corpus.actd", &dump)?;
    let tokens = read_activations(&dump)?;
    if tokens.rows() != meta.rows.len() {
        return Err(CliError::artifact(&dump, "row count differs from corpus.csv"));
    }
    let (split, dom) = (meta.column("split"), meta.column("dominant"));
    let (Some(split), Some(dom)) = (split, dom) else {
        return Err(CliError::artifact(&meta_path, "missing split/dominant columns"));
    };
    Ok(meta
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| CorpusRow {
            id: format!("{}-{i:05}", r[dom]),
            train: r[split] == "train",
            tokens: tokens.row(i).iter().map(|&x| x as u32).collect(),
        })
        .collect())
}

pub fn load_windows(run: &mut RunDir, data: &Path, role: Role) -> Result<Vec<(String, TimeSeriesWindow)>> {
    let path = data.join("windows.csv");
    let t = run.input_csv("data/windows.csv", &path)?;
    let col = |n: &'static str| t.column(n).ok_or_else(|| CliError::artifact(&path, format!("missing column {n}")));
    let (id, src, r, ctx, tgt) = (col("window")?, col("source")?, col("role")?, col("context")?, col("target")?);
    let mut out = Vec::new();
    for row in &t.rows {
        let this = Role::parse(&row[r]).ok_or_else(|| CliError::artifact(&path, format!("bad role {:?}", row[r])))?;
        if this != role {
            continue;
        }
        let w = TimeSeriesWindow::new(split_values(&row[ctx], &path)?, split_values(&row[tgt], &path)?, row[src].clone())
            .ok_or_else(|| CliError::artifact(&path, format!("window {} has no finite context", row[id])))?;
        out.push((row[id].clone(), w));
    }
    if out.is_empty() {
        return Err(CliError::artifact(&path, format!("no {} windows", role.name())));
    }
    Ok(out)
}

pub fn load_bank(run: &mut RunDir, data: &Path) -> Result<SeriesBank> {
    let ids = run.input_csv("data/bank.csv", &data.join("bank.csv"))?;
    let dump = data.join("bank.actd");
    run.input("data/bank.actd", &dump)?;
    let m = read_activations(&dump)?;
    if m.rows() != ids.rows.len() {
        return Err(CliError::artifact(&dump, "row count differs from bank.csv"));
    }
    Ok(SeriesBank {
        windows: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
        ids: ids.rows.iter().map(|r| r[1].clone()).collect(),
    })
}
