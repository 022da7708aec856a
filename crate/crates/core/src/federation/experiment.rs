use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    run_fl, run_ll, ClientData, Configuration, EpochLog, ModelKey, Paradigm, RoundPlan, TrainConfig,
};
use crate::corruption::{corrupt_all, CorruptionConfig, CorruptionKind};
use crate::data::{
    generate_dataset, iid_partition, pooled_split, prepare_all, split_test, split_train_val,
    GenConfig, PartitionPlan, Prepared, Sample, SplitPlan,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricRecord};
use crate::model::{AttentionUNet, UNetConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Which paradigms an experiment trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParadigmKind {
    Cl,
    Fl,
    Ll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    /// Network input height and width.
    pub height: usize,
    pub width: usize,
    pub test_fraction: f64,
    /// Validation share of the pooled centralized data.
    pub pooled_val_fraction: f64,
    pub generator: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 400,
            height: 32,
            width: 64,
            test_fraction: 0.10,
            pooled_val_fraction: 0.10,
            generator: GenConfig::default(),
        }
    }
}

/// Everything needed to reproduce one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub n_clients: usize,
    pub faulty_client: usize,
    pub configurations: Vec<Configuration>,
    pub paradigms: Vec<ParadigmKind>,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
    pub data: DataConfig,
    pub model: UNetConfig,
    pub rounds: RoundPlan,
    pub training: TrainConfig,
    pub corruption: CorruptionConfig,
    /// Where the command-line driver writes the run; not used by training.
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            n_clients: 5,
            faulty_client: 0,
            configurations: vec![Configuration::Baseline],
            paradigms: vec![ParadigmKind::Cl, ParadigmKind::Fl, ParadigmKind::Ll],
            threshold: 0.5,
            data: DataConfig::default(),
            model: UNetConfig::default(),
            rounds: RoundPlan::default(),
            training: TrainConfig::default(),
            corruption: CorruptionConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_dims(self.data.height, self.data.width)?;
        self.rounds.validate()?;
        self.data.generator.validate()?;
        let mut c = self.corruption.clone();
        c.kind = CorruptionKind::None;
        c.validate()?;
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        if self.faulty_client >= self.n_clients {
            return Err(Error::Config(format!(
                "faulty_client {} is not one of {} clients",
                self.faulty_client, self.n_clients
            )));
        }
        if self.configurations.is_empty() {
            return Err(Error::Config(
                "at least one configuration is required".into(),
            ));
        }
        if self.configurations.contains(&Configuration::Exclusion) && self.n_clients < 2 {
            return Err(Error::Config("exclusion needs at least two clients".into()));
        }
        if self.paradigms.is_empty() {
            return Err(Error::Config("at least one paradigm is required".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Which data a job trains on: baseline data, or data with the faulty
/// client's share corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clean,
    Label,
    Image,
}

/// One model to train, shared by every key in `keys`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub paradigm: Paradigm,
    /// Configuration the model is trained for first; reused models list the others in `keys`.
    pub keys: Vec<ModelKey>,
    pub variant: Variant,
    /// Clients whose data enters training (FL participants, the CL pool, or the LL client).
    pub clients: Vec<usize>,
}

impl Job {
    pub fn canonical(&self) -> ModelKey {
        self.keys[0]
    }
}

fn variant_of(c: Configuration) -> Variant {
    match c {
        Configuration::LabelManip => Variant::Label,
        Configuration::ImageManip => Variant::Image,
        _ => Variant::Clean,
    }
}

/// Expands configurations into training jobs. Local models of healthy
/// clients are trained once and shared by every configuration.
pub fn configure_experiment(
    configurations: &[Configuration],
    paradigms: &[ParadigmKind],
    n_clients: usize,
    faulty: usize,
) -> Result<Vec<Job>> {
    if faulty >= n_clients {
        return Err(Error::Config(format!(
            "faulty client {faulty} outside 0..{n_clients}"
        )));
    }
    let mut configs = configurations.to_vec();
    configs.sort();
    configs.dedup();
    let all: Vec<usize> = (0..n_clients).collect();
    let healthy: Vec<usize> = all.iter().copied().filter(|c| *c != faulty).collect();
    let mut jobs: Vec<Job> = Vec::new();
    let mut shared_ll: BTreeMap<usize, usize> = BTreeMap::new();
    for &config in &configs {
        let variant = variant_of(config);
        let cohort = if config == Configuration::Exclusion {
            &healthy
        } else {
            &all
        };
        if paradigms.contains(&ParadigmKind::Cl) {
            jobs.push(Job {
                paradigm: Paradigm::Centralized,
                keys: vec![ModelKey::new(config, Paradigm::Centralized)],
                variant,
                clients: cohort.clone(),
            });
        }
        if paradigms.contains(&ParadigmKind::Fl) {
            jobs.push(Job {
                paradigm: Paradigm::Federated,
                keys: vec![ModelKey::new(config, Paradigm::Federated)],
                variant,
                clients: cohort.clone(),
            });
        }
        if paradigms.contains(&ParadigmKind::Ll) {
            for &c in cohort {
                let key = ModelKey::new(config, Paradigm::Local(c));
                if c == faulty && variant != Variant::Clean {
                    jobs.push(Job {
                        paradigm: Paradigm::Local(c),
                        keys: vec![key],
                        variant,
                        clients: vec![c],
                    });
                } else if let Some(&j) = shared_ll.get(&c) {
                    jobs[j].keys.push(key);
                } else {
                    shared_ll.insert(c, jobs.len());
                    jobs.push(Job {
                        paradigm: Paradigm::Local(c),
                        keys: vec![key],
                        variant: Variant::Clean,
                        clients: vec![c],
                    });
                }
            }
        }
    }
    Ok(jobs)
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub job: Job,
    pub model: AttentionUNet<T>,
    pub logs: Vec<EpochLog>,
    /// Scores on the shared test set.
    pub records: Vec<MetricRecord>,
}

pub struct ExperimentOutcome<T> {
    pub config: ExperimentConfig,
    pub samples: Vec<Sample>,
    pub partition: PartitionPlan,
    pub splits: SplitPlan,
    /// Faulty-client samples after corruption, per variant.
    pub corrupted: BTreeMap<Variant, Vec<Sample>>,
    pub trained: Vec<TrainedModel<T>>,
}

impl<T: Scalar> ExperimentOutcome<T> {
    pub fn model(&self, key: ModelKey) -> Option<&TrainedModel<T>> {
        self.trained.iter().find(|t| t.job.keys.contains(&key))
    }

    /// Test-set scores of every model key, shared models listed under each key.
    pub fn tables(&self) -> BTreeMap<ModelKey, Vec<MetricRecord>> {
        self.trained
            .iter()
            .flat_map(|t| t.job.keys.iter().map(move |k| (*k, t.records.clone())))
            .collect()
    }

    /// Prepared clean validation data of `client`.
    pub fn clean_val(&self, client: usize) -> Result<Vec<Prepared<T>>> {
        let ids = &self.splits.clients[client].val;
        let picked: Vec<Sample> = ids
            .iter()
            .map(|&id| self.samples[id as usize].clone())
            .collect();
        prepare_all(&picked, self.config.data.height, self.config.data.width)
    }
}

struct Materialized<T> {
    test: Vec<Prepared<T>>,
    /// Per variant, per client.
    clients: BTreeMap<Variant, Vec<ClientData<T>>>,
}

fn client_data<T: Scalar>(
    samples: &[Sample],
    splits: &SplitPlan,
    client: usize,
    dims: (usize, usize),
) -> Result<ClientData<T>> {
    let pick = |ids: &[u64]| -> Result<Vec<Prepared<T>>> {
        ids.iter()
            .map(|&id| Prepared::new(&samples[id as usize], dims.0, dims.1))
            .collect()
    };
    let s = &splits.clients[client];
    Ok(ClientData {
        client: Some(client),
        train: pick(&s.train)?,
        val: pick(&s.val)?,
    })
}

/// Generates data, trains every job and scores each model on the test set.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    crate::runtime::tune_allocator();
    let seed = cfg.seed;
    let dims = (cfg.data.height, cfg.data.width);
    let samples = generate_dataset(cfg.data.n, seed, &cfg.data.generator)?;
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let (test_ids, rest) = split_test(&ids, cfg.data.test_fraction, seed)?;
    let partition = iid_partition(&rest, cfg.n_clients, seed)?;
    let splits = split_train_val(test_ids, &partition)?;
    let jobs = configure_experiment(
        &cfg.configurations,
        &cfg.paradigms,
        cfg.n_clients,
        cfg.faulty_client,
    )?;

    let faulty = cfg.faulty_client;
    let faulty_ids = splits.clients[faulty].all();
    let mut corrupted = BTreeMap::new();
    let mut data = Materialized {
        test: splits
            .test
            .iter()
            .map(|&id| Prepared::new(&samples[id as usize], dims.0, dims.1))
            .collect::<Result<Vec<_>>>()?,
        clients: BTreeMap::new(),
    };
    let clean: Vec<ClientData<T>> = (0..cfg.n_clients)
        .map(|c| client_data(&samples, &splits, c, dims))
        .collect::<Result<_>>()?;
    let mut variants: Vec<Variant> = jobs.iter().map(|j| j.variant).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        let kind = match v {
            Variant::Clean => {
                data.clients.insert(v, clean.clone());
                continue;
            }
            Variant::Label => CorruptionKind::Label,
            Variant::Image => CorruptionKind::Image,
        };
        let ccfg = CorruptionConfig {
            kind,
            ..cfg.corruption.clone()
        };
        let originals: Vec<Sample> = faulty_ids
            .iter()
            .map(|&id| samples[id as usize].clone())
            .collect();
        let changed = corrupt_all(&originals, &ccfg, seed)?;
        let mut patched = samples.clone();
        for s in &changed {
            patched[s.id as usize] = s.clone();
        }
        let mut per_client = clean.clone();
        per_client[faulty] = client_data(&patched, &splits, faulty, dims)?;
        data.clients.insert(v, per_client);
        corrupted.insert(v, changed);
    }

    let init = AttentionUNet::<T>::new(cfg.model.clone(), seed)?;
    let mut trained = Vec::with_capacity(jobs.len());
    for job in jobs {
        log::info!(
            "training {} ({} data, clients {:?})",
            job.canonical(),
            format!("{:?}", job.variant).to_lowercase(),
            job.clients
        );
        let pool = &data.clients[&job.variant];
        let (model, logs) = match job.paradigm {
            Paradigm::Local(c) => run_ll(&init, &pool[c], &cfg.rounds, &cfg.training, seed)?,
            Paradigm::Federated => {
                let participants: Vec<ClientData<T>> =
                    job.clients.iter().map(|&c| pool[c].clone()).collect();
                let out = run_fl(&init, &participants, &cfg.rounds, &cfg.training, seed)?;
                (out.global, out.logs)
            }
            Paradigm::Centralized => {
                let pooled_ids: Vec<u64> = job
                    .clients
                    .iter()
                    .flat_map(|&c| splits.clients[c].all())
                    .collect();
                let split = pooled_split(&pooled_ids, cfg.data.pooled_val_fraction, seed)?;
                let lookup: BTreeMap<u64, &Prepared<T>> = job
                    .clients
                    .iter()
                    .flat_map(|&c| pool[c].train.iter().chain(&pool[c].val))
                    .map(|p| (p.id, p))
                    .collect();
                let pick =
                    |ids: &[u64]| ids.iter().map(|id| lookup[id].clone()).collect::<Vec<_>>();
                let pooled = ClientData {
                    client: None,
                    train: pick(&split.train),
                    val: pick(&split.val),
                };
                run_ll(&init, &pooled, &cfg.rounds, &cfg.training, seed)?
            }
        };
        let records = evaluate(&model, &data.test, cfg.threshold)?.records;
        trained.push(TrainedModel {
            job,
            model,
            logs,
            records,
        });
    }
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        samples,
        partition,
        splits,
        corrupted,
        trained,
    })
}
