//! Federated, centralized and local training, and the four experimental
//! configurations built from them.

mod experiment;
mod trainer;

pub use experiment::{
    configure_experiment, run_experiment, DataConfig, ExperimentConfig, ExperimentOutcome, Job,
    ParadigmKind, Precision, TrainedModel, Variant,
};
pub use trainer::{
    eval_loss, run_cl, run_fl, run_ll, train_epoch, ClientData, EpochLog, FlOutcome,
};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AdamWConfig, DiceReduction, OptimizerKind, StateDict, Tensor};

/// Weighted parameter average `sum_i (w_i / sum w) * params_i`, applied to
/// trainable tensors and BatchNorm statistics alike.
pub fn fedavg<T: Scalar>(states: &[StateDict<T>], weights: &[f64]) -> Result<StateDict<T>> {
    let first = states
        .first()
        .ok_or_else(|| Error::Aggregation("nothing to aggregate".into()))?;
    if states.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} parameter sets but {} weights",
            states.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(
            "aggregation weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("aggregation weights sum to zero".into()));
    }
    for (i, s) in states.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(Error::Aggregation(format!(
                "client {i} has a different parameter set"
            )));
        }
        for (name, t) in first {
            match s.get(name) {
                None => return Err(Error::Aggregation(format!("client {i} lacks {name}"))),
                Some(u) if u.shape() != t.shape() => {
                    return Err(Error::Aggregation(format!(
                        "{name}: shape {} at client {i}, {} at client 0",
                        u.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    let coef: Vec<T> = weights.iter().map(|w| T::of(w / total)).collect();
    let mut out = StateDict::new();
    for (name, base) in first {
        let others: Vec<&[T]> = states.iter().map(|s| s[name].data()).collect();
        // base + sum_i c_i (x_i - base): identical inputs reproduce base exactly
        let data = base
            .data()
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let mut acc = b;
                let (mut lo, mut hi) = (b, b);
                for (x, &c) in others.iter().zip(&coef).skip(1) {
                    acc += c * (x[j] - b);
                    lo = lo.min(x[j]);
                    hi = hi.max(x[j]);
                }
                acc.max(lo).min(hi)
            })
            .collect();
        out.insert(name.clone(), Tensor::from_vec(base.shape(), data)?);
    }
    Ok(out)
}

/// Round structure shared by all paradigms; FL splits `total_epochs` into rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundPlan {
    pub total_epochs: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
}

impl Default for RoundPlan {
    fn default() -> Self {
        Self {
            total_epochs: 20,
            rounds: 4,
            epochs_per_round: 5,
            batch_size: 4,
        }
    }
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "rounds, epochs_per_round and batch_size must be positive".into(),
            ));
        }
        if self.rounds * self.epochs_per_round != self.total_epochs {
            return Err(Error::Config(format!(
                "{} rounds x {} epochs != {} total epochs",
                self.rounds, self.epochs_per_round, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Optimizer and loss settings of the local trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub adamw: AdamWConfig,
    pub dice_smooth: f64,
    pub reduction: DiceReduction,
    /// Fresh optimizer state for every client at every round start.
    pub reset_optimizer: bool,
    /// Train FL clients of a round concurrently.
    pub parallel_clients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            adamw: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            dice_smooth: 1.0,
            reduction: DiceReduction::PerSampleMean,
            reset_optimizer: true,
            parallel_clients: false,
        }
    }
}

/// Training paradigm of one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Paradigm {
    Local(usize),
    Centralized,
    Federated,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Paradigm::Local(c) => write!(f, "LL{c}"),
            Paradigm::Centralized => f.write_str("CL"),
            Paradigm::Federated => f.write_str("FL"),
        }
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CL" => Ok(Paradigm::Centralized),
            "FL" => Ok(Paradigm::Federated),
            other => other
                .strip_prefix("LL")
                .and_then(|c| c.parse().ok())
                .map(Paradigm::Local)
                .ok_or_else(|| Error::Config(format!("unknown paradigm {s}"))),
        }
    }
}

impl Serialize for Paradigm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Paradigm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// The four experimental configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    Baseline,
    LabelManip,
    ImageManip,
    Exclusion,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [
        Configuration::Baseline,
        Configuration::LabelManip,
        Configuration::ImageManip,
        Configuration::Exclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Baseline => "baseline",
            Configuration::LabelManip => "label_manip",
            Configuration::ImageManip => "image_manip",
            Configuration::Exclusion => "exclusion",
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration {s}")))
    }
}

/// A trained model within an experiment: configuration plus paradigm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKey {
    pub configuration: Configuration,
    pub paradigm: Paradigm,
}

impl ModelKey {
    pub fn new(configuration: Configuration, paradigm: Paradigm) -> Self {
        Self {
            configuration,
            paradigm,
        }
    }

    pub fn paradigm_label(&self) -> String {
        self.paradigm.to_string()
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.configuration, self.paradigm)
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub run_id: String,
    pub paradigm: Paradigm,
    pub configuration: Configuration,
    /// `None` for centralized training on pooled data.
    pub client: Option<usize>,
    pub epoch: usize,
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_train_log<W: Write>(mut out: W, records: &[TrainLogRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_train_log<R: BufRead>(input: R) -> Result<Vec<TrainLogRecord>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::Input(format!("train log line {}: {e}", i + 1)))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("train log line {}: {e}", i + 1)))
        })
        .collect()
}

/// Groups log records by model.
pub fn logs_by_model(records: &[TrainLogRecord]) -> BTreeMap<ModelKey, Vec<TrainLogRecord>> {
    let mut out: BTreeMap<ModelKey, Vec<TrainLogRecord>> = BTreeMap::new();
    for r in records {
        out.entry(ModelKey::new(r.configuration, r.paradigm))
            .or_default()
            .push(r.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn state(v: f64) -> StateDict<f64> {
        let mut s = StateDict::new();
        s.insert("w".into(), Tensor::full(Shape::scalar(), v));
        s
    }

    #[test]
    fn weighted_scalar_mean() {
        let out = fedavg(&[state(1.0), state(3.0)], &[1.0, 3.0]).unwrap();
        assert_eq!(out["w"].item(), 2.5);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(
            fedavg(&[state(1.0), state(2.0)], &[0.0, 0.0]),
            Err(Error::Config(_))
        ));
        let mut other = state(1.0);
        other.insert("extra".into(), Tensor::zeros(Shape::scalar()));
        assert!(matches!(
            fedavg(&[state(1.0), other], &[1.0, 1.0]),
            Err(Error::Aggregation(_))
        ));
        let mut wrong = StateDict::new();
        wrong.insert("w".into(), Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(
            fedavg(&[state(1.0), wrong], &[1.0, 1.0]),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn paradigm_and_configuration_names_round_trip() {
        for p in [
            Paradigm::Centralized,
            Paradigm::Federated,
            Paradigm::Local(3),
        ] {
            assert_eq!(p.to_string().parse::<Paradigm>().unwrap(), p);
        }
        for c in Configuration::ALL {
            assert_eq!(c.name().parse::<Configuration>().unwrap(), c);
        }
        assert!("nope".parse::<Configuration>().is_err());
        assert!("LLx".parse::<Paradigm>().is_err());
    }

    #[test]
    fn round_plan_must_multiply_out() {
        assert!(RoundPlan::default().validate().is_ok());
        let bad = RoundPlan {
            total_epochs: 21,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
