//! Benchmark reports.
//!
//! JSON is canonical: keys appear in declaration order. CSV and the
//! markdown table are projections of it.
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "seed": u64,
//!   "task": "text_char" | "synthetic_pattern" | "intensity_grid",
//!   "rows": [ BenchRow, ... ]
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::TaskKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write report to {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("json encoding failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv encoding failed: {0}")]
    Csv(#[from] csv::Error),
}

/// One decode configuration of one model over the whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Training regime or model label.
    pub regime: String,
    pub k: usize,
    pub criterion: String,
    pub examples: usize,
    pub mean_accepted_block_size: f64,
    pub iterations_total: usize,
    pub invocations_total: usize,
    pub output_tokens_total: usize,
    pub wall_clock_ns_median: u64,
    pub greedy_wall_clock_ns_median: u64,
    pub wall_clock_speedup_vs_greedy: f64,
    pub greedy_match_rate: f64,
    pub quality_metric: String,
    pub task_quality_metric: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub seed: u64,
    pub task: TaskKind,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn new(seed: u64, task: TaskKind, rows: Vec<BenchRow>) -> Self {
        Self { schema_version: SCHEMA_VERSION, seed, task, rows }
    }

    /// Copy with every wall-clock field zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.wall_clock_ns_median = 0;
            row.greedy_wall_clock_ns_median = 0;
            row.wall_clock_speedup_vs_greedy = 0.0;
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    #[value(alias = "markdown-table", alias = "md")]
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "markdown-table" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// `x` with six significant digits, without exponent notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const CSV_COLUMNS: [&str; 15] = [
    "regime",
    "k",
    "criterion",
    "examples",
    "mean_accepted_block_size",
    "iterations_total",
    "invocations_total",
    "output_tokens_total",
    "wall_clock_ns_median",
    "greedy_wall_clock_ns_median",
    "wall_clock_speedup_vs_greedy",
    "greedy_match_rate",
    "quality_metric",
    "task_quality_metric",
    "token_accuracy",
];

pub fn to_json(report: &BenchReport) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn to_csv(report: &BenchReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.regime.clone(),
            r.k.to_string(),
            r.criterion.clone(),
            r.examples.to_string(),
            sig6(r.mean_accepted_block_size),
            r.iterations_total.to_string(),
            r.invocations_total.to_string(),
            r.output_tokens_total.to_string(),
            r.wall_clock_ns_median.to_string(),
            r.greedy_wall_clock_ns_median.to_string(),
            sig6(r.wall_clock_speedup_vs_greedy),
            sig6(r.greedy_match_rate),
            r.quality_metric.clone(),
            sig6(r.task_quality_metric),
            sig6(r.token_accuracy),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Rows are (k, criterion), columns are regimes, cells are
/// `quality / mean accepted block size`.
pub fn to_markdown(report: &BenchReport) -> String {
    let mut regimes: Vec<&str> = Vec::new();
    let mut keys: Vec<(usize, &str)> = Vec::new();
    let mut cells: BTreeMap<(usize, &str, &str), &BenchRow> = BTreeMap::new();
    for r in &report.rows {
        if !regimes.contains(&r.regime.as_str()) {
            regimes.push(&r.regime);
        }
        let key = (r.k, r.criterion.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
        cells.insert((r.k, &r.criterion, &r.regime), r);
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let metric = report.rows.first().map_or("quality", |r| r.quality_metric.as_str());
    let mut out = String::new();
    let _ = writeln!(out, "Cells: {metric} / mean accepted block size\n");
    let _ = writeln!(out, "| k | criterion | {} |", regimes.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(regimes.len()));
    for (k, criterion) in keys {
        let row: Vec<String> = regimes
            .iter()
            .map(|regime| match cells.get(&(k, criterion, regime)) {
                Some(r) => format!("{:.3} / {:.2}", r.task_quality_metric, r.mean_accepted_block_size),
                None => "-".to_string(),
            })
            .collect();
        let _ = writeln!(out, "| {k} | {criterion} | {} |", row.join(" | "));
    }
    out
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String, ReportError> {
    match format {
        ReportFormat::Json => to_json(report),
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Markdown => Ok(to_markdown(report)),
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|source| ReportError::Write { path: path.display().to_string(), source })
}
