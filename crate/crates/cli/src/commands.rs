//! `detect`, `compare` and `eval`: thin wrappers over the library.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use fedseg::anomaly::{detect, trajectories_from_logs, AnomalyReport, DetectorConfig};
use fedseg::data::{import_dataset, prepare_all};
use fedseg::federation::{logs_by_model, read_train_log, ExperimentConfig, Paradigm, Precision};
use fedseg::metrics::{evaluate, Metric, MetricRecord};
use fedseg::stats::{bonferroni, comparison_suite, wilcoxon_two_sided};
use fedseg::Scalar;

use crate::checkpoint::load_checkpoint;
use crate::config::load_config;
use crate::error::{CliError, Result};
use crate::run::{RunManifest, METRICS, TRAIN_LOG};
use crate::tables::{read_metrics, suite_rows, write_records, write_significance, SignificanceRow};

pub const ANOMALY: &str = "anomaly.json";

/// Runs the detector on every federated model of a run and writes
/// `anomaly.json` (configuration name to report). Models trained by fewer
/// than three clients are skipped.
pub fn cmd_detect(run_dir: &Path, cfg: &DetectorConfig) -> Result<BTreeMap<String, AnomalyReport>> {
    let path = run_dir.join(TRAIN_LOG);
    let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let records = read_train_log(BufReader::new(file))?;
    let mut reports = BTreeMap::new();
    for (key, logs) in logs_by_model(&records) {
        if key.paradigm != Paradigm::Federated {
            continue;
        }
        let trajectories = trajectories_from_logs(&logs)?;
        let report = match detect(&trajectories, cfg) {
            Ok(r) => r,
            Err(fedseg::Error::Cohort(reason)) => {
                log::warn!("{}: skipped, {reason}", key.configuration);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        log::info!("{}: flagged {:?}", key.configuration, report.flagged);
        reports.insert(key.configuration.to_string(), report);
    }
    if reports.is_empty() {
        return Err(CliError::table(&path, "no federated training logs"));
    }
    let out = run_dir.join(ANOMALY);
    let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
    fs::write(&out, text + "\n").map_err(|e| CliError::io(&out, e))?;
    Ok(reports)
}

/// Significance rows for a set of runs.
///
/// Models present in several runs are compared run against run. The merged
/// tables (first run wins on duplicates) also feed the planned comparison
/// suite when every model it needs is present.
pub fn cmd_compare(runs: &[PathBuf], out: &Path) -> Result<Vec<SignificanceRow>> {
    let tables = runs
        .iter()
        .map(|r| read_metrics(&r.join(METRICS)))
        .collect::<Result<Vec<_>>>()?;
    let mut across = Vec::new();
    for i in 0..tables.len() {
        for j in i + 1..tables.len() {
            for (key, a) in &tables[i] {
                if let Some(b) = tables[j].get(key) {
                    across.push((i, j, *key, a, b));
                }
            }
        }
    }
    let mut rows = Vec::new();
    if !across.is_empty() {
        let alpha = bonferroni(0.05, across.len())?;
        for (i, j, key, a, b) in across {
            if a.len() != b.len()
                || a.iter()
                    .zip(b.iter())
                    .any(|(x, y)| x.sample_id != y.sample_id)
            {
                return Err(CliError::table(
                    runs[j].join(METRICS),
                    format!("{key} is not aligned with run {}", runs[i].display()),
                ));
            }
            for metric in Metric::ALL {
                let (x, y): (Vec<f64>, Vec<f64>) = a
                    .iter()
                    .zip(b.iter())
                    .filter_map(|(p, q)| Some((p.get(metric)?, q.get(metric)?)))
                    .unzip();
                if x.is_empty() {
                    continue;
                }
                let r = wilcoxon_two_sided(&x, &y)?;
                rows.push(SignificanceRow::new(
                    "across-runs",
                    format!("{key}: run {i} vs run {j}"),
                    format!("{}:{key}", runs[i].display()),
                    format!("{}:{key}", runs[j].display()),
                    metric,
                    &r,
                    alpha,
                ));
            }
        }
    }
    let mut merged = BTreeMap::new();
    for t in &tables {
        for (k, v) in t {
            merged.entry(*k).or_insert_with(|| v.clone());
        }
    }
    match comparison_suite(&merged, 0.05) {
        Ok(suite) => rows.extend(suite_rows(&suite)),
        Err(e @ fedseg::Error::Suite(_)) if !rows.is_empty() => {
            log::warn!("planned comparisons skipped: {e}")
        }
        Err(e) => return Err(e.into()),
    }
    write_significance(out, &rows)?;
    Ok(rows)
}

/// Finds the experiment configuration for a checkpoint: an explicit TOML
/// file, or the manifest of the run that wrote it.
pub fn resolve_config(checkpoint: &Path, config: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(p) = config {
        return load_config(p);
    }
    let run_dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| CliError::Config {
            path: checkpoint.to_path_buf(),
            reason: "cannot locate the run manifest; pass --config".into(),
        })?;
    Ok(RunManifest::load(run_dir)?.config)
}

/// Scores a checkpoint on every sample of a dataset directory.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<MetricRecord>> {
    let records = match cfg.precision {
        Precision::F64 => eval_typed::<f64>(checkpoint, data, cfg)?,
        Precision::F32 => eval_typed::<f32>(checkpoint, data, cfg)?,
    };
    if let Some(out) = out {
        write_records(out, &records)?;
    }
    Ok(records)
}

fn eval_typed<T: Scalar>(
    checkpoint: &Path,
    data: &Path,
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricRecord>> {
    let model = load_checkpoint::<T>(checkpoint, &cfg.model)?;
    let (samples, _) = import_dataset(data)?;
    let prepared = prepare_all::<T>(&samples, cfg.data.height, cfg.data.width)?;
    Ok(evaluate(&model, &prepared, cfg.threshold)?.records)
}
