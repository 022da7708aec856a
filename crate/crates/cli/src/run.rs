//! The `run` pipeline: train every model of the configured experiment and
//! persist checkpoints, logs and tables under one output directory.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use fedseg::data::{export_dataset, DatasetManifest, Sample};
use fedseg::federation::{
    run_experiment, write_train_log, ExperimentConfig, ExperimentOutcome, Precision, TrainLogRecord,
};
use fedseg::stats::comparison_suite;
use fedseg::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::error::{CliError, Result, StageExt};
use crate::tables::{suite_rows, write_metrics, write_significance, write_summary};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const SIGNIFICANCE: &str = "significance.csv";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const INCOMPLETE: &str = "INCOMPLETE";
const LOCK: &str = ".lock";

/// A trained model and where its weights live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    /// `<configuration>_<paradigm>`.
    pub key: String,
    pub checkpoint: String,
    /// Key under which the shared model was first trained.
    pub trained_as: String,
}

/// Index of everything a run wrote. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset_manifest: String,
    /// SHA-256 of the dataset manifest file.
    pub dataset_sha256: String,
    pub corrupted: BTreeMap<String, String>,
    pub models: Vec<ModelEntry>,
    pub train_log: String,
    pub metrics: String,
    pub summary: String,
    pub significance: Option<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::table(&path, e))
    }

    /// Paths that must exist for the manifest to be complete.
    pub fn referenced_paths(&self) -> Vec<&str> {
        let mut v: Vec<&str> = vec![
            &self.dataset_manifest,
            &self.train_log,
            &self.metrics,
            &self.summary,
        ];
        v.extend(self.corrupted.values().map(String::as_str));
        v.extend(self.models.iter().map(|m| m.checkpoint.as_str()));
        v.extend(self.significance.as_deref());
        v
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Runs the experiment into `out`. On failure the directory keeps its
/// partial outputs and an `INCOMPLETE` marker naming the failed stage.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let _lock = RunLock::acquire(out)?;
    let marker = out.join(INCOMPLETE);
    write(&marker, "started\n")?;
    let result = match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, out),
        Precision::F32 => run_typed::<f32>(cfg, out),
    };
    match &result {
        Ok(_) => fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?,
        Err(e) => write(&marker, format!("{e}\n"))?,
    }
    result
}

fn export_corrupted(dir: &Path, samples: &[Sample], base: &DatasetManifest) -> Result<()> {
    let manifest = DatasetManifest {
        entries: Vec::new(),
        test: Vec::new(),
        assignment: BTreeMap::new(),
        clients: Vec::new(),
        ..base.clone()
    };
    export_dataset(dir, samples, manifest)?;
    Ok(())
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    log::info!("running seed {} into {}", cfg.seed, out.display());
    let outcome: ExperimentOutcome<T> = run_experiment(cfg).stage("train")?;

    let dataset_dir = out.join("dataset");
    let base = DatasetManifest {
        seed: cfg.seed,
        generator: cfg.data.generator.clone(),
        entries: Vec::new(),
        test: outcome.splits.test.clone(),
        assignment: outcome.partition.assignment.clone(),
        clients: outcome.splits.clients.clone(),
    };
    let dataset_manifest =
        export_dataset(&dataset_dir, &outcome.samples, base.clone()).stage("export")?;
    let mut corrupted = BTreeMap::new();
    for (variant, samples) in &outcome.corrupted {
        let name = format!("{variant:?}").to_lowercase();
        let dir = dataset_dir.join(format!("corrupted_{name}"));
        export_corrupted(&dir, samples, &base).stage("export")?;
        corrupted.insert(
            name.clone(),
            format!("dataset/corrupted_{name}/manifest.json"),
        );
    }

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let mut models = Vec::new();
    let mut log_records = Vec::new();
    let run_id = format!("seed{}", cfg.seed);
    for t in &outcome.trained {
        let canonical = t.job.canonical().to_string();
        let file = format!("checkpoints/{canonical}.fseg");
        save_checkpoint(&t.model, &out.join(&file)).stage("checkpoint")?;
        for key in &t.job.keys {
            models.push(ModelEntry {
                key: key.to_string(),
                checkpoint: file.clone(),
                trained_as: canonical.clone(),
            });
            log_records.extend(t.logs.iter().map(|e| TrainLogRecord {
                run_id: run_id.clone(),
                paradigm: key.paradigm,
                configuration: key.configuration,
                client: e.client,
                epoch: e.epoch,
                round: e.round,
                train_loss: e.train_loss,
                val_loss: e.val_loss,
            }));
        }
    }
    models.sort_by(|a, b| a.key.cmp(&b.key));

    let log_path = out.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    write_train_log(std::io::BufWriter::new(file), &log_records)
        .map_err(|e| CliError::io(&log_path, e))?;

    let tables = outcome.tables();
    write_metrics(&out.join(METRICS), &tables).stage("evaluate")?;
    write_summary(&out.join(SUMMARY), &tables).stage("evaluate")?;
    let significance = match comparison_suite(&tables, 0.05) {
        Ok(suite) => {
            write_significance(&out.join(SIGNIFICANCE), &suite_rows(&suite)).stage("compare")?;
            Some(SIGNIFICANCE.to_string())
        }
        Err(fedseg::Error::Suite(reason)) => {
            log::warn!("no significance table: {reason}");
            None
        }
        Err(e) => return Err(e).stage("compare"),
    };

    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_manifest: "dataset/manifest.json".into(),
        dataset_sha256: sha256_file(&dataset_manifest)?,
        corrupted,
        models,
        train_log: TRAIN_LOG.into(),
        metrics: METRICS.into(),
        summary: SUMMARY.into(),
        significance,
    };
    for p in manifest.referenced_paths() {
        if !out.join(p).exists() {
            return Err(CliError::table(
                out.join(p),
                "referenced by the manifest but missing",
            ))
            .stage("manifest");
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}
