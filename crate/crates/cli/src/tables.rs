//! CSV tables: per-image metrics, per-model summaries and significance rows.

use std::collections::BTreeMap;
use std::path::Path;

use fedseg::federation::{Configuration, ModelKey, Paradigm};
use fedseg::metrics::{summarize, Metric, MetricRecord};
use fedseg::stats::{ComparisonSuite, Family, Method, TestResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    configuration: Configuration,
    paradigm: Paradigm,
    sample_id: u64,
    dice: f64,
    iou: f64,
    hd: Option<f64>,
    hd95: Option<f64>,
    assd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    configuration: Configuration,
    paradigm: Paradigm,
    metric: Metric,
    median: f64,
    iqr: f64,
    p95: f64,
    count: usize,
    skipped: usize,
}

/// One line of a significance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub family: String,
    pub comparison: String,
    pub first: String,
    pub second: String,
    pub metric: Metric,
    pub n_effective: usize,
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub method: Method,
    pub alpha_corrected: f64,
    pub significant: bool,
}

impl SignificanceRow {
    pub fn new(
        family: &str,
        comparison: String,
        first: String,
        second: String,
        metric: Metric,
        r: &TestResult,
        alpha: f64,
    ) -> Self {
        Self {
            family: family.to_string(),
            comparison,
            first,
            second,
            metric,
            n_effective: r.n_effective,
            statistic: r.statistic,
            w_plus: r.w_plus,
            w_minus: r.w_minus,
            p_value: r.p_value,
            method: r.method,
            alpha_corrected: alpha,
            significant: r.p_value < alpha,
        }
    }
}

pub fn suite_rows(suite: &ComparisonSuite) -> Vec<SignificanceRow> {
    suite
        .rows
        .iter()
        .flat_map(|row| {
            let family = match row.family {
                Family::WithinConfiguration => "within-configuration",
                Family::WithinParadigm => "within-paradigm",
            };
            row.results.iter().map(move |(m, r)| {
                SignificanceRow::new(
                    family,
                    row.label(),
                    row.first.to_string(),
                    row.second.to_string(),
                    *m,
                    r,
                    suite.alpha_corrected,
                )
            })
        })
        .collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::table(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_metrics(path: &Path, tables: &BTreeMap<ModelKey, Vec<MetricRecord>>) -> Result<()> {
    let mut w = writer(path)?;
    for (key, records) in tables {
        for r in records {
            w.serialize(MetricRow {
                configuration: key.configuration,
                paradigm: key.paradigm,
                sample_id: r.sample_id,
                dice: r.dice,
                iou: r.iou,
                hd: r.hd,
                hd95: r.hd95,
                assd: r.assd,
            })
            .map_err(|e| CliError::table(path, e))?;
        }
    }
    finish(w, path)
}

pub fn read_metrics(path: &Path) -> Result<BTreeMap<ModelKey, Vec<MetricRecord>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => CliError::table(path, e),
    })?;
    let mut out: BTreeMap<ModelKey, Vec<MetricRecord>> = BTreeMap::new();
    for row in reader.deserialize::<MetricRow>() {
        let row = row.map_err(|e| CliError::table(path, e))?;
        out.entry(ModelKey::new(row.configuration, row.paradigm))
            .or_default()
            .push(MetricRecord {
                sample_id: row.sample_id,
                dice: row.dice,
                iou: row.iou,
                hd: row.hd,
                hd95: row.hd95,
                assd: row.assd,
            });
    }
    Ok(out)
}

pub fn write_summary(path: &Path, tables: &BTreeMap<ModelKey, Vec<MetricRecord>>) -> Result<()> {
    let mut w = writer(path)?;
    for (key, records) in tables {
        for s in summarize(records) {
            w.serialize(SummaryRow {
                configuration: key.configuration,
                paradigm: key.paradigm,
                metric: s.metric,
                median: s.median,
                iqr: s.iqr,
                p95: s.p95,
                count: s.count,
                skipped: s.skipped,
            })
            .map_err(|e| CliError::table(path, e))?;
        }
    }
    finish(w, path)
}

pub fn write_significance(path: &Path, rows: &[SignificanceRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::table(path, e))?;
    }
    finish(w, path)
}

pub fn read_significance(path: &Path) -> Result<Vec<SignificanceRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::table(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| CliError::table(path, e)))
        .collect()
}

/// Per-image metrics of a single evaluation, without model columns.
pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::table(path, e))?;
    }
    finish(w, path)
}
