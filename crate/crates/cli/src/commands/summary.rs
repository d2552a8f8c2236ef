//! `report`: merges run directories into tables, SVG figures and a markdown
//! summary.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::io::{fmt_f64, CsvTable, RunDir};
use crate::plot::LinePlot;
use crate::report::{fixture_checks, FairTopKTable, RetrievalRow, to_f64, PROBE_CONDITIONS};

pub const ALIGNMENT_SCHEMA: &str = "alignment/v1";
pub const CHECKS_SCHEMA: &str = "fixture_checks/v1";

struct Run {
    label: String,
    path: PathBuf,
}

impl Run {
    fn table(&self, out: &mut RunDir, file: &str) -> Result<Option<CsvTable>> {
        let p = self.path.join(file);
        if !p.exists() {
            return Ok(None);
        }
        out.input_csv(&format!("{}/{file}", self.label), &p).map(Some)
    }
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn col(t: &CsvTable, path: &Path, name: &str) -> Result<usize> {
    t.column(name).ok_or_else(|| CliError::artifact(path, format!("missing column {name}")))
}

/// `(x, y)` pairs from two columns, optionally filtered by a third.
fn xy(t: &CsvTable, path: &Path, x: &str, y: &str, filter: Option<(&str, &str)>) -> Result<Vec<(f64, f64)>> {
    let (xi, yi) = (col(t, path, x)?, col(t, path, y)?);
    let fi = filter.map(|(c, _)| col(t, path, c)).transpose()?;
    Ok(t.rows
        .iter()
        .filter(|r| match (fi, filter) {
            (Some(i), Some((_, v))) => r[i] == v,
            _ => true,
        })
        .map(|r| (num(&r[xi]), num(&r[yi])))
        .collect())
}

pub fn report(run: &mut RunDir, runs: &[PathBuf]) -> Result<()> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one --run".into()));
    }
    let runs: Vec<Run> = runs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p.file_name().map_or_else(|| format!("run{i}"), |s| s.to_string_lossy().into_owned());
            Run { label: base, path: p.clone() }
        })
        .collect();
    let mut md = String::from("# tslab report\n\n");

    let mut checks = CsvTable::new(CHECKS_SCHEMA, &["check", "passed", "detail"]);
    let results = fixture_checks().map_err(|e| CliError::Failed(e.to_string()))?;
    let _ = writeln!(md, "## Reference table checks\n");
    for c in &results {
        checks.push(vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]);
        let _ = writeln!(md, "- {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
    }
    run.write_csv("fixture_checks.csv", &checks)?;

    let mut loss = LinePlot::new("Training loss", "step", "loss");
    let mut align = LinePlot::new("Alignment", "step", "alignment").log_x();
    let mut crps = LinePlot::new("Held-out CRPS", "step", "CRPS");
    let mut erank = LinePlot::new("Mean effective rank", "step", "erank");
    let mut merged = CsvTable::new(
        ALIGNMENT_SCHEMA,
        &["run", "step", "alignment", "mean_erank", "one_minus_coherence", "crps"],
    );
    let _ = writeln!(md, "\n## Runs\n");
    let mut figures: Vec<&str> = Vec::new();
    for r in &runs {
        let _ = writeln!(md, "- `{}`", r.label);
        if let Some(t) = r.table(run, "train_loss.csv")? {
            loss.add(&r.label, xy(&t, &r.path, "step", "train_loss", None)?);
        }
        if let Some(t) = r.table(run, "alignment.csv")? {
            let p = r.path.join("alignment.csv");
            for row in &t.rows {
                let mut out = vec![r.label.clone()];
                for name in ["step", "alignment", "mean_erank", "one_minus_coherence", "crps"] {
                    out.push(row[col(&t, &p, name)?].clone());
                }
                merged.push(out);
            }
            // Step 0 is dropped on the log axis.
            align.add(&r.label, xy(&t, &p, "step", "alignment", None)?);
            crps.add(&r.label, xy(&t, &p, "step", "crps", None)?);
            erank.add(&r.label, xy(&t, &p, "step", "mean_erank", None)?);
        }
        if let Some(t) = r.table(run, "fair_top_k.csv")? {
            let p = r.path.join("fair_top_k.csv");
            let mut plot = LinePlot::new("Fair top-K probe MSE", "K", "MSE").log_x();
            for c in PROBE_CONDITIONS {
                plot.add(c, xy(&t, &p, "k", c, None)?);
            }
            run.write(&format!("fair_top_k_{}.svg", r.label), plot.to_svg().as_bytes())?;
            let top = FairTopKTable::read(&t).map_err(|e| CliError::artifact(&p, e.to_string()))?;
            let _ = writeln!(md, "  - fair top-K ordering monotone in K: {}", top.monotone_in_k());
        }
        if let Some(t) = r.table(run, "retrieval_summary.csv")? {
            let p = r.path.join("retrieval_summary.csv");
            let s = RetrievalRow::read(&t).map_err(|e| CliError::artifact(&p, e.to_string()))?;
            let _ = writeln!(
                md,
                "  - retrieval MSE {} vs last value {} (win rate {})",
                fmt_f64(to_f64(s.retrieval_mse)),
                fmt_f64(to_f64(s.last_value_mse)),
                fmt_f64(to_f64(s.win_rate))
            );
        }
        if let Some(t) = r.table(run, "overlay.csv")? {
            let p = r.path.join("overlay.csv");
            let mut plot = LinePlot::new("Retrieval forecast", "position", "value");
            for c in ["truth", "retrieval", "last_value"] {
                plot.add(c, xy(&t, &p, "position", c, None)?);
            }
            run.write(&format!("overlay_{}.svg", r.label), plot.to_svg().as_bytes())?;
        }
        if let Some(t) = r.table(run, "pca.csv")? {
            let p = r.path.join("pca.csv");
            let layer = col(&t, &p, "layer")?;
            let ck = col(&t, &p, "checkpoint")?;
            let mut keys: Vec<(String, String)> = t.rows.iter().map(|row| (row[ck].clone(), row[layer].clone())).collect();
            keys.dedup();
            let mut plot = LinePlot::new("PCA trajectory of a sine probe", "pc1", "pc2");
            for (c, l) in &keys {
                let pts = t
                    .rows
                    .iter()
                    .filter(|row| &row[ck] == c && &row[layer] == l)
                    .map(|row| (num(&row[col(&t, &p, "pc1").unwrap_or(0)]), num(&row[col(&t, &p, "pc2").unwrap_or(0)])))
                    .collect();
                plot.add(&format!("{c} L{l}"), pts);
            }
            run.write(&format!("pca_{}.svg", r.label), plot.to_svg().as_bytes())?;
        }
        if let Some(t) = r.table(run, "effective_transfer.csv")? {
            let p = r.path.join("effective_transfer.csv");
            let (reg, dt) = (col(&t, &p, "regime")?, col(&t, &p, "d_t")?);
            for row in &t.rows {
                let _ = writeln!(md, "  - D_T ({}): {}", row[reg], row[dt]);
            }
        }
    }
    run.write_csv("alignment.csv", &merged)?;
    for (name, plot) in [("loss.svg", &loss), ("alignment.svg", &align), ("crps.svg", &crps), ("erank.svg", &erank)] {
        if plot.series.iter().any(|s| !s.points.is_empty()) {
            run.write(name, plot.to_svg().as_bytes())?;
            figures.push(name);
        }
    }
    if !figures.is_empty() {
        let _ = writeln!(md, "\n## Figures\n");
        for f in figures {
            let _ = writeln!(md, "- ![{f}]({f})");
        }
    }
    run.write("report.md", md.as_bytes())?;
    Ok(())
}
