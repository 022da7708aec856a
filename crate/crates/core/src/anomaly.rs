//! Faulty-client detection from per-client training-loss trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::federation::{eval_loss, TrainLogRecord};
use crate::model::Segmenter;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub client: usize,
    pub epochs: Vec<EpochLoss>,
}

impl LossTrajectory {
    pub fn new(client: usize, epochs: Vec<EpochLoss>) -> Result<Self> {
        let t = Self { client, epochs };
        t.validate()?;
        Ok(t)
    }

    /// Trajectory with epochs `0..train.len()` and no validation losses.
    pub fn from_train(client: usize, train: &[f64]) -> Result<Self> {
        Self::new(
            client,
            train
                .iter()
                .enumerate()
                .map(|(epoch, &train_loss)| EpochLoss {
                    epoch,
                    train_loss,
                    val_loss: 0.0,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.epochs.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return Err(Error::Input(format!(
                    "client {}: epoch {} follows {}",
                    self.client, w[1].epoch, w[0].epoch
                )));
            }
        }
        for e in &self.epochs {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(e.train_loss) || !(ok(e.val_loss) || e.val_loss.is_nan()) {
                return Err(Error::Input(format!(
                    "client {} epoch {}: losses must be finite and non-negative",
                    self.client, e.epoch
                )));
            }
        }
        Ok(())
    }
}

/// Per-client trajectories of one federated model, in client order.
pub fn trajectories_from_logs(records: &[TrainLogRecord]) -> Result<Vec<LossTrajectory>> {
    let mut by_client: BTreeMap<usize, Vec<EpochLoss>> = BTreeMap::new();
    for r in records {
        let client = r
            .client
            .ok_or_else(|| Error::Input("log record without a client id".into()))?;
        by_client.entry(client).or_default().push(EpochLoss {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
        });
    }
    by_client
        .into_iter()
        .map(|(client, mut epochs)| {
            epochs.sort_by_key(|e| e.epoch);
            LossTrajectory::new(client, epochs)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub delta_abs: f64,
    pub delta_rel: f64,
    pub k_consecutive: usize,
    pub warmup_epochs: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            delta_abs: 0.02,
            delta_rel: 0.25,
            k_consecutive: 3,
            warmup_epochs: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_abs.is_finite()
            && self.delta_abs >= 0.0
            && self.delta_rel.is_finite()
            && self.delta_rel >= 0.0)
        {
            return Err(Error::Config(
                "detector thresholds must be finite and non-negative".into(),
            ));
        }
        if self.k_consecutive == 0 {
            return Err(Error::Config("k_consecutive must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEvidence {
    pub client: usize,
    /// Epoch at which the run of exceedances first reached `k_consecutive`.
    pub first_flagged_epoch: Option<usize>,
    /// Largest loss minus cohort median after warmup.
    pub max_margin: f64,
    /// Longest run of epochs above threshold.
    pub consecutive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub config: DetectorConfig,
    pub participants: Vec<usize>,
    pub flagged: Vec<usize>,
    pub evidence: Vec<ClientEvidence>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Flags clients whose training loss stays above the cohort median by more
/// than `max(delta_abs, delta_rel * median)` for `k_consecutive` epochs after warmup.
pub fn detect(trajectories: &[LossTrajectory], cfg: &DetectorConfig) -> Result<AnomalyReport> {
    cfg.validate()?;
    if trajectories.len() < 3 {
        return Err(Error::Cohort(format!(
            "anomaly detection needs at least 3 clients, got {}",
            trajectories.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for t in trajectories {
        t.validate()?;
        if !seen.insert(t.client) {
            return Err(Error::Input(format!("client {} appears twice", t.client)));
        }
    }
    let reference: Vec<usize> = trajectories[0].epochs.iter().map(|e| e.epoch).collect();
    for t in &trajectories[1..] {
        if t.epochs.len() != reference.len()
            || t.epochs.iter().zip(&reference).any(|(e, r)| e.epoch != *r)
        {
            return Err(Error::Input(format!(
                "client {} epochs are not aligned with client {}",
                t.client, trajectories[0].client
            )));
        }
    }
    let mut evidence: Vec<ClientEvidence> = trajectories
        .iter()
        .map(|t| ClientEvidence {
            client: t.client,
            first_flagged_epoch: None,
            max_margin: f64::NEG_INFINITY,
            consecutive: 0,
        })
        .collect();
    let mut runs = vec![0usize; trajectories.len()];
    let mut column = Vec::with_capacity(trajectories.len());
    for (pos, &epoch) in reference.iter().enumerate().skip(cfg.warmup_epochs) {
        column.clear();
        column.extend(trajectories.iter().map(|t| t.epochs[pos].train_loss));
        let med = median(&mut column);
        let threshold = med + cfg.delta_abs.max(cfg.delta_rel * med);
        for (i, t) in trajectories.iter().enumerate() {
            let loss = t.epochs[pos].train_loss;
            let ev = &mut evidence[i];
            ev.max_margin = ev.max_margin.max(loss - med);
            if loss > threshold {
                runs[i] += 1;
                ev.consecutive = ev.consecutive.max(runs[i]);
                if runs[i] >= cfg.k_consecutive && ev.first_flagged_epoch.is_none() {
                    ev.first_flagged_epoch = Some(epoch);
                }
            } else {
                runs[i] = 0;
            }
        }
    }
    for ev in &mut evidence {
        if ev.max_margin == f64::NEG_INFINITY {
            ev.max_margin = 0.0;
        }
    }
    let mut participants: Vec<usize> = trajectories.iter().map(|t| t.client).collect();
    participants.sort_unstable();
    let mut flagged: Vec<usize> = evidence
        .iter()
        .filter(|e| e.first_flagged_epoch.is_some())
        .map(|e| e.client)
        .collect();
    flagged.sort_unstable();
    evidence.sort_by_key(|e| e.client);
    Ok(AnomalyReport {
        config: *cfg,
        participants,
        flagged,
        evidence,
    })
}

/// Eval-mode Dice loss of `model` on a client's clean validation set.
pub fn clean_revalidate<T: Scalar, M: Segmenter<T>>(
    model: &M,
    clean_val: &[Prepared<T>],
    smooth: f64,
) -> Result<f64> {
    if clean_val.is_empty() {
        return Err(Error::Input("clean validation set is empty".into()));
    }
    eval_loss(model, clean_val, smooth)
}

/// Participants without the flagged clients. If every client is flagged,
/// all are retained.
pub fn exclusion_policy(report: &AnomalyReport) -> Vec<usize> {
    let kept: Vec<usize> = report
        .participants
        .iter()
        .copied()
        .filter(|c| !report.flagged.contains(c))
        .collect();
    if kept.is_empty() {
        log::warn!("every client was flagged; keeping the full cohort");
        return report.participants.clone();
    }
    kept
}
