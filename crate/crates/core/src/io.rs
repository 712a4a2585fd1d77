//! CSV ingestion of claim tables and serialization of reports.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::conformal::{Dataset, IntervalMethod, IntervalWarning, ObservationPair, PredictionInterval};
use crate::error::{Error, Result};
use crate::simulation::SimulationReport;

/// Column layout of a claims table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsTableSchema {
    /// Response column (settled amount).
    pub response: String,
    /// Predictor columns, in the order they enter the feature vector.
    pub predictors: Vec<String>,
    /// Predictors whose missing cells are read as 0 instead of rejecting the row.
    pub zero_fill: Vec<String>,
}

impl Default for ClaimsTableSchema {
    /// The personal-injury layout: `total` against `inj1..inj5`, `legrep`,
    /// `accmonth`, `repmonth`, `finmonth` and `op_time`.
    fn default() -> Self {
        let injuries: Vec<String> = (1..=5).map(|i| format!("inj{i}")).collect();
        let mut predictors = injuries.clone();
        predictors.extend(
            ["legrep", "accmonth", "repmonth", "finmonth", "op_time"]
                .iter()
                .map(|s| s.to_string()),
        );
        Self {
            response: "total".into(),
            predictors,
            zero_fill: injuries,
        }
    }
}

impl ClaimsTableSchema {
    pub fn with_response(mut self, response: impl Into<String>) -> Self {
        self.response = response.into();
        self
    }

    pub fn with_predictors(mut self, predictors: Vec<String>) -> Self {
        self.zero_fill.retain(|c| predictors.contains(c));
        self.predictors = predictors;
        self
    }
}

/// A data row dropped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line in the file.
    pub line: u64,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedRow>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "N/A" | "." | "NaN")
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<f64> {
    let trimmed = cell.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Cell {
            row: line as usize,
            column: column.to_string(),
            message: format!("`{trimmed}` is not a finite number"),
        }),
    }
}

/// Reads a claims table from any reader.
///
/// Missing cells in zero-fill columns become 0; a missing cell anywhere else
/// drops the row with a logged diagnostic. Non-numeric cells and negative
/// responses are errors carrying their location.
pub fn read_claims<R: Read>(reader: R, schema: &ClaimsTableSchema) -> Result<Ingested> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Invalid("missing header row".into()));
    }
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let response_col = locate(&schema.response)?;
    let predictor_cols: Vec<(usize, &str, bool)> = schema
        .predictors
        .iter()
        .map(|name| Ok((locate(name)?, name.as_str(), schema.zero_fill.contains(name))))
        .collect::<Result<_>>()?;
    if predictor_cols.is_empty() {
        return Err(Error::Empty("predictor list"));
    }

    let mut pairs = Vec::new();
    let mut rejected = Vec::new();
    'rows: for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");

        let response_cell = cell(response_col);
        if is_missing(response_cell) {
            warn!("line {line}: missing `{}`, row skipped", schema.response);
            rejected.push(RejectedRow {
                line,
                column: schema.response.clone(),
            });
            continue;
        }
        let y = parse_cell(response_cell, line, &schema.response)?;
        if y < 0.0 {
            return Err(Error::Cell {
                row: line as usize,
                column: schema.response.clone(),
                message: format!("negative response {y}"),
            });
        }

        let mut x = Vec::with_capacity(predictor_cols.len());
        for &(col, name, zero_fill) in &predictor_cols {
            let raw = cell(col);
            if is_missing(raw) {
                if zero_fill {
                    x.push(0.0);
                    continue;
                }
                warn!("line {line}: missing `{name}`, row skipped");
                rejected.push(RejectedRow {
                    line,
                    column: name.to_string(),
                });
                continue 'rows;
            }
            x.push(parse_cell(raw, line, name)?);
        }
        pairs.push(ObservationPair::new(x, y));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(Ingested {
        dataset: Dataset::new(pairs)?,
        rejected,
    })
}

/// Reads a claims table from `path`.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &ClaimsTableSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    Ok(read_claims(file, schema)?.dataset)
}

/// Writes a dataset back out under `schema`'s column names.
pub fn write_dataset_csv<W: Write>(
    dataset: &Dataset,
    schema: &ClaimsTableSchema,
    writer: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![schema.response.clone()];
    header.extend(schema.predictors.iter().cloned());
    out.write_record(&header)?;
    for z in dataset.pairs() {
        let mut row = vec![z.y.to_string()];
        row.extend(z.x.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses one comma-separated feature vector of length `p`.
pub fn parse_feature_line(line: &str, p: usize) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    let record = reader
        .records()
        .next()
        .ok_or(Error::Empty("feature line"))??;
    let x: Vec<f64> = record
        .iter()
        .enumerate()
        .map(|(j, cell)| parse_cell(cell, 1, &format!("feature {}", j + 1)))
        .collect::<Result<_>>()?;
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    Ok(x)
}

/// Serialized form of a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub level: f64,
    pub alpha: f64,
    pub lower: f64,
    /// `None` for an unbounded interval.
    pub upper: Option<f64>,
    pub k_index: Option<usize>,
    pub n: usize,
    pub p: usize,
    pub method: IntervalMethod,
    /// How the new feature vector was chosen.
    pub mode: String,
    pub warning: Option<IntervalWarning>,
}

impl PredictionRecord {
    pub fn new(interval: &PredictionInterval, n: usize, p: usize, mode: &str) -> Self {
        Self {
            level: interval.level,
            alpha: 1.0 - interval.level,
            lower: interval.lower,
            upper: interval.upper.is_finite().then_some(interval.upper),
            k_index: interval.k_index,
            n,
            p,
            method: interval.method,
            mode: mode.to_string(),
            warning: interval.warning,
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    scenario: String,
    method: &'a str,
    n: usize,
    #[serde(rename = "N")]
    reps: usize,
    alpha: f64,
    master_seed: u64,
    covered: usize,
    coverage_probability: f64,
    mean_length: f64,
    mean_length_ratio: f64,
    oracle_upper: f64,
    unbounded_intervals: usize,
    failed_fits: usize,
    degenerate_intervals: usize,
    wall_clock_seconds: f64,
}

pub fn write_report_json<W: Write>(report: &SimulationReport, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, report)
        .map_err(|e| Error::Invalid(format!("json: {e}")))?;
    writeln!(writer)?;
    Ok(())
}

pub fn read_report_json<R: Read>(reader: R) -> Result<SimulationReport> {
    serde_json::from_reader(reader).map_err(|e| Error::Invalid(format!("json: {e}")))
}

/// One row per method.
pub fn write_report_csv<W: Write>(report: &SimulationReport, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for m in &report.methods {
        out.serialize(ReportRow {
            scenario: report.scenario.to_string(),
            method: m.method.as_str(),
            n: report.n,
            reps: report.reps,
            alpha: report.alpha,
            master_seed: report.master_seed,
            covered: m.covered,
            coverage_probability: m.coverage_probability,
            mean_length: m.mean_length,
            mean_length_ratio: m.mean_length_ratio,
            oracle_upper: report.oracle_upper,
            unbounded_intervals: m.unbounded_intervals,
            failed_fits: m.failed_fits,
            degenerate_intervals: m.degenerate_intervals,
            wall_clock_seconds: report.wall_clock_seconds,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Rounded, human-readable table of a report.
pub fn summary_table(report: &SimulationReport) -> String {
    let mut s = format!(
        "{} n={} N={} alpha={} seed={} oracle upper={:.4}\n",
        report.scenario, report.n, report.reps, report.alpha, report.master_seed, report.oracle_upper
    );
    s.push_str(&format!(
        "{:<15} {:>10} {:>14}\n",
        "method", "coverage", "length/oracle"
    ));
    for m in &report.methods {
        s.push_str(&format!(
            "{:<15} {:>9.2}% {:>14.4}\n",
            m.method.as_str(),
            100.0 * m.coverage_probability,
            m.mean_length_ratio
        ));
    }
    s
}
