//! Readers for reference tables and run summaries.
//!
//! Decimal cells are parsed into exact `Ratio<i64>` values so consistency
//! checks (differences, ratios, orderings) carry no rounding error. `---`
//! marks a missing cell.

use std::path::Path;

use num_rational::Ratio;
use thiserror::Error;
use tslab::circuits::is_superadditive;
use tslab::crosscoder::{label_for, FeatureLabel};

use crate::io::CsvTable;

pub type Exact = Ratio<i64>;

pub const MISSING: &str = "---";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("not a decimal: {0:?}")]
    Decimal(String),
    #[error("expected schema {expected}, found {found}")]
    Schema { expected: &'static str, found: String },
    #[error("missing column {0}")]
    Column(&'static str),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

/// Parses `-12.345`, `7`, or `41.8%` exactly.
pub fn parse_decimal(s: &str) -> Result<Exact, ReportError> {
    let err = || ReportError::Decimal(s.to_string());
    let t = s.trim();
    let (t, percent) = match t.strip_suffix('%') {
        Some(p) => (p, true),
        None => (t, false),
    };
    let (neg, t) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t),
    };
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    if int.len() + frac.len() > 18 {
        return Err(err());
    }
    let digits: i64 = format!("{int}{frac}").parse().map_err(|_| err())?;
    let mut den = 10i64.pow(frac.len() as u32);
    if percent {
        den = den.checked_mul(100).ok_or_else(err)?;
    }
    let r = Exact::new(digits, den);
    Ok(if neg { -r } else { r })
}

pub fn parse_cell(s: &str) -> Result<Option<Exact>, ReportError> {
    if s.trim() == MISSING {
        Ok(None)
    } else {
        parse_decimal(s).map(Some)
    }
}

pub fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn expect_schema(t: &CsvTable, expected: &'static str) -> Result<(), ReportError> {
    if t.schema != expected {
        return Err(ReportError::Schema { expected, found: t.schema.clone() });
    }
    Ok(())
}

fn col(t: &CsvTable, name: &'static str) -> Result<usize, ReportError> {
    t.column(name).ok_or(ReportError::Column(name))
}

fn cell(t: &CsvTable, row: usize, name: &'static str) -> Result<Exact, ReportError> {
    let c = col(t, name)?;
    parse_decimal(&t.rows[row][c]).map_err(|e| ReportError::Row { row, reason: e.to_string() })
}

fn single_row(t: &CsvTable) -> Result<(), ReportError> {
    if t.rows.len() != 1 {
        return Err(ReportError::Row { row: t.rows.len(), reason: "expected exactly one row".into() });
    }
    Ok(())
}

// ----------------------------------------------------------------------------
// Fair top-K coverage

pub const FAIR_TOP_K_SCHEMA: &str = "fair_top_k/v1";
pub const PROBE_CONDITIONS: [&str; 4] = ["text_pt", "text_randinit", "rand_pt", "rand_randinit"];

#[derive(Debug, Clone, PartialEq)]
pub struct FairTopKTable {
    pub conditions: Vec<String>,
    pub rows: Vec<(usize, Vec<Option<Exact>>)>,
}

impl FairTopKTable {
    pub fn read(t: &CsvTable) -> Result<Self, ReportError> {
        expect_schema(t, FAIR_TOP_K_SCHEMA)?;
        if t.header.first().map(String::as_str) != Some("k") {
            return Err(ReportError::Column("k"));
        }
        let conditions = t.header[1..].to_vec();
        let rows = t
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let bad = |e: String| ReportError::Row { row: i, reason: e };
                let k = r[0].trim().parse().map_err(|_| bad(format!("bad K {:?}", r[0])))?;
                let vals = r[1..].iter().map(|c| parse_cell(c).map_err(|e| bad(e.to_string()))).collect::<Result<_, _>>()?;
                Ok((k, vals))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { conditions, rows })
    }

    pub fn row(&self, k: usize) -> Option<&[Option<Exact>]> {
        self.rows.iter().find(|(kk, _)| *kk == k).map(|(_, v)| v.as_slice())
    }

    /// Present conditions at `k`, best (lowest MSE) first.
    pub fn ordering(&self, k: usize) -> Vec<(&str, Exact)> {
        let mut out: Vec<(&str, Exact)> = self
            .row(k)
            .map(|v| {
                v.iter().zip(&self.conditions).filter_map(|(x, c)| x.map(|x| (c.as_str(), x))).collect()
            })
            .unwrap_or_default();
        out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
        out
    }

    /// Whether each condition's error is non-decreasing in K where present.
    pub fn monotone_in_k(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| r.0);
        (0..self.conditions.len()).all(|c| {
            let vals: Vec<Exact> = rows.iter().filter_map(|r| r.1[c]).collect();
            vals.windows(2).all(|w| w[0] <= w[1])
        })
    }
}

// ----------------------------------------------------------------------------
// Retrieval

pub const RETRIEVAL_SCHEMA: &str = "retrieval_summary/v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalRow {
    pub retrieval_mse: Exact,
    pub last_value_mse: Exact,
    pub win_rate: Exact,
}

impl RetrievalRow {
    pub fn read(t: &CsvTable) -> Result<Self, ReportError> {
        expect_schema(t, RETRIEVAL_SCHEMA)?;
        single_row(t)?;
        Ok(Self {
            retrieval_mse: cell(t, 0, "retrieval_mse")?,
            last_value_mse: cell(t, 0, "last_value_mse")?,
            win_rate: cell(t, 0, "win_rate")?,
        })
    }
}

pub const FORECAST_EXAMPLE_SCHEMA: &str = "forecast_example/v1";

/// Best-case retrieval example: `(retrieval MSE, last-value MSE)`.
pub fn read_forecast_example(t: &CsvTable) -> Result<(Exact, Exact), ReportError> {
    expect_schema(t, FORECAST_EXAMPLE_SCHEMA)?;
    single_row(t)?;
    Ok((cell(t, 0, "retrieval_mse")?, cell(t, 0, "baseline_mse")?))
}

// ----------------------------------------------------------------------------
// Effective transfer per regime

pub const TRANSFER_SCHEMA: &str = "effective_transfer/v1";

pub fn read_transfer(t: &CsvTable) -> Result<Vec<(String, Exact)>, ReportError> {
    expect_schema(t, TRANSFER_SCHEMA)?;
    let r = col(t, "regime")?;
    (0..t.rows.len()).map(|i| Ok((t.rows[i][r].clone(), cell(t, i, "d_t")?))).collect()
}

// ----------------------------------------------------------------------------
// Circuits

pub const ABLATION_SCHEMA: &str = "component_ablation/v1";
pub const COMPOSITION_SCHEMA: &str = "composition/v1";
pub const CIRCUIT_TRANSFER_SCHEMA: &str = "circuit_transfer/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub component: String,
    pub delta_periodic: Exact,
    pub delta_control: Exact,
    pub selectivity: Exact,
}

impl AblationRow {
    pub fn consistent(&self) -> bool {
        self.delta_periodic - self.delta_control == self.selectivity
    }
}

pub fn read_ablation(t: &CsvTable) -> Result<Vec<AblationRow>, ReportError> {
    expect_schema(t, ABLATION_SCHEMA)?;
    let c = col(t, "component")?;
    (0..t.rows.len())
        .map(|i| {
            Ok(AblationRow {
                component: t.rows[i][c].clone(),
                delta_periodic: cell(t, i, "delta_periodic")?,
                delta_control: cell(t, i, "delta_control")?,
                selectivity: cell(t, i, "selectivity")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRow {
    pub set: String,
    pub combined: Exact,
    pub sum_individual: Exact,
    /// The ratio as printed (rounded).
    pub rho: Exact,
}

impl CompositionRow {
    pub fn exact_rho(&self) -> Option<Exact> {
        (self.sum_individual > Exact::from_integer(0)).then(|| self.combined / self.sum_individual)
    }

    /// Whether the printed ratio is the exact ratio rounded half-up to the
    /// printed number of decimals.
    pub fn rho_matches(&self, decimals: u32) -> bool {
        let Some(r) = self.exact_rho() else { return false };
        let scale = Exact::from_integer(10i64.pow(decimals));
        let rounded = (r * scale + Exact::new(1, 2)).floor() / scale;
        rounded == self.rho
    }

    pub fn superadditive(&self) -> bool {
        self.exact_rho().is_some_and(is_superadditive)
    }
}

pub fn read_composition(t: &CsvTable) -> Result<Vec<CompositionRow>, ReportError> {
    expect_schema(t, COMPOSITION_SCHEMA)?;
    let s = col(t, "set")?;
    (0..t.rows.len())
        .map(|i| {
            Ok(CompositionRow {
                set: t.rows[i][s].clone(),
                combined: cell(t, i, "combined")?,
                sum_individual: cell(t, i, "sum_individual")?,
                rho: cell(t, i, "rho")?,
            })
        })
        .collect()
}

pub fn read_circuit_transfer(t: &CsvTable) -> Result<Exact, ReportError> {
    expect_schema(t, CIRCUIT_TRANSFER_SCHEMA)?;
    single_row(t)?;
    cell(t, 0, "mean_delta")
}

// ----------------------------------------------------------------------------
// Crosscoder features and PCA band

pub const FEATURE_SCHEMA: &str = "crosscoder_feature/v1";
pub const PCA_BAND_SCHEMA: &str = "pca_variance_band/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub feature: String,
    pub rate_a: Exact,
    pub rate_b: Exact,
}

impl FeatureRow {
    pub fn label(&self, threshold: f64) -> FeatureLabel {
        label_for(to_f64(self.rate_a), to_f64(self.rate_b), threshold)
    }
}

pub fn read_features(t: &CsvTable) -> Result<Vec<FeatureRow>, ReportError> {
    expect_schema(t, FEATURE_SCHEMA)?;
    let f = col(t, "feature")?;
    (0..t.rows.len())
        .map(|i| Ok(FeatureRow { feature: t.rows[i][f].clone(), rate_a: cell(t, i, "rate_a")?, rate_b: cell(t, i, "rate_b")? }))
        .collect()
}

pub fn read_pca_band(t: &CsvTable) -> Result<(Exact, Exact), ReportError> {
    expect_schema(t, PCA_BAND_SCHEMA)?;
    single_row(t)?;
    Ok((cell(t, 0, "lower")?, cell(t, 0, "upper")?))
}

// ----------------------------------------------------------------------------
// Bundled reference tables

pub struct Fixture {
    pub name: &'static str,
    pub text: &'static str,
}

pub const FIXTURES: [Fixture; 9] = [
    Fixture { name: "fair_top_k.csv", text: include_str!("../fixtures/fair_top_k.csv") },
    Fixture { name: "retrieval_summary.csv", text: include_str!("../fixtures/retrieval_summary.csv") },
    Fixture { name: "forecast_example.csv", text: include_str!("../fixtures/forecast_example.csv") },
    Fixture { name: "effective_transfer.csv", text: include_str!("../fixtures/effective_transfer.csv") },
    Fixture { name: "component_ablation.csv", text: include_str!("../fixtures/component_ablation.csv") },
    Fixture { name: "composition.csv", text: include_str!("../fixtures/composition.csv") },
    Fixture { name: "circuit_transfer.csv", text: include_str!("../fixtures/circuit_transfer.csv") },
    Fixture { name: "crosscoder_feature.csv", text: include_str!("../fixtures/crosscoder_feature.csv") },
    Fixture { name: "pca_variance_band.csv", text: include_str!("../fixtures/pca_variance_band.csv") },
];

pub fn fixture(name: &str) -> CsvTable {
    let f = FIXTURES.iter().find(|f| f.name == name).unwrap_or_else(|| panic!("no fixture {name}"));
    CsvTable::parse(f.text, Path::new(f.name)).expect("bundled fixture parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

/// Internal-consistency checks over the bundled reference tables.
pub fn fixture_checks() -> Result<Vec<Check>, ReportError> {
    let mut out = Vec::new();
    let top = FairTopKTable::read(&fixture("fair_top_k.csv"))?;
    let best_everywhere = top.rows.iter().all(|(k, _)| top.ordering(*k).first().map(|b| b.0) == Some("text_pt"));
    out.push(check("fair_top_k.text_pt_best", best_everywhere, format!("{} K rows", top.rows.len())));
    out.push(check("fair_top_k.monotone", top.monotone_in_k(), String::new()));

    let r = RetrievalRow::read(&fixture("retrieval_summary.csv"))?;
    out.push(check(
        "retrieval.beats_last_value",
        r.retrieval_mse < r.last_value_mse,
        format!("{} vs {}", to_f64(r.retrieval_mse), to_f64(r.last_value_mse)),
    ));
    let (a, b) = read_forecast_example(&fixture("forecast_example.csv"))?;
    out.push(check("forecast_example.ratio", a < b, format!("{}", a / b)));

    let dt = read_transfer(&fixture("effective_transfer.csv"))?;
    let decreasing = dt.windows(2).all(|w| w[0].1 > w[1].1);
    let order: Vec<&str> = dt.iter().map(|d| d.0.as_str()).collect();
    out.push(check("effective_transfer.ordering", decreasing, order.join(" > ")));

    let abl = read_ablation(&fixture("component_ablation.csv"))?;
    out.push(check("ablation.selectivity_is_difference", abl.iter().all(AblationRow::consistent), format!("{} rows", abl.len())));

    let comp = read_composition(&fixture("composition.csv"))?;
    out.push(check("composition.rho_rounding", comp.iter().all(|c| c.rho_matches(2)), String::new()));
    let flags: Vec<String> = comp.iter().map(|c| format!("{}={}", c.set, c.superadditive())).collect();
    out.push(check("composition.flags", comp.iter().any(|c| c.superadditive()) && comp.iter().any(|c| !c.superadditive()), flags.join(" ")));

    let mean = read_circuit_transfer(&fixture("circuit_transfer.csv"))?;
    out.push(check("circuit_transfer.positive", mean > Exact::from_integer(0), format!("{}", to_f64(mean))));

    let feats = read_features(&fixture("crosscoder_feature.csv"))?;
    out.push(check("crosscoder.shared_feature", feats.iter().all(|f| f.label(0.01) == FeatureLabel::AB), String::new()));

    let (lo, hi) = read_pca_band(&fixture("pca_variance_band.csv"))?;
    out.push(check("pca_band.ordered", Exact::from_integer(0) < lo && lo < hi && hi <= Exact::from_integer(1), String::new()));
    Ok(out)
}
