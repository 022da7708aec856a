use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Validation share of a client partition: 41 of 372 at full scale.
pub const CLIENT_VAL_RATIO: f64 = 41.0 / 372.0;

/// Stream tag for the pooled (centralized) validation split.
const POOLED: u64 = u64::MAX;

fn shuffled(ids: &[u64], seed: u64, tags: &[u64]) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.shuffle(&mut rng::stream(seed, tags));
    v
}

fn sorted(mut v: Vec<u64>) -> Vec<u64> {
    v.sort_unstable();
    v
}

/// Number of test samples for `n` samples: `floor(fraction * n)`.
pub fn test_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Draws the held-out test set. Returns `(test, rest)`, both sorted.
pub fn split_test(ids: &[u64], fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {fraction} must lie in (0, 1)"
        )));
    }
    let order = shuffled(ids, seed, &[rng::tag::TEST_SPLIT]);
    let t = test_count(ids.len(), fraction);
    Ok((sorted(order[..t].to_vec()), sorted(order[t..].to_vec())))
}

/// Assignment of sample ids to clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub seed: u64,
    pub assignment: BTreeMap<u64, usize>,
}

impl PartitionPlan {
    /// Sorted ids of every client.
    pub fn parts(&self) -> Vec<Vec<u64>> {
        let mut parts = vec![Vec::new(); self.n_clients];
        for (&id, &c) in &self.assignment {
            parts[c].push(id);
        }
        parts
    }
}

/// Random near-equal partition; the first `n mod k` clients get one extra sample.
pub fn iid_partition(rest: &[u64], n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if rest.len() < n_clients {
        return Err(Error::Config(format!(
            "{} samples cannot fill {n_clients} partitions",
            rest.len()
        )));
    }
    let order = shuffled(rest, seed, &[rng::tag::PARTITION]);
    let (base, extra) = (rest.len() / n_clients, rest.len() % n_clients);
    let mut assignment = BTreeMap::new();
    let mut next = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        for &id in &order[next..next + size] {
            assignment.insert(id, c);
        }
        next += size;
    }
    Ok(PartitionPlan {
        n_clients,
        seed,
        assignment,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

impl ClientSplit {
    pub fn all(&self) -> Vec<u64> {
        sorted(self.train.iter().chain(&self.val).copied().collect())
    }
}

/// Validation count within one client partition.
pub fn client_val_count(part: usize) -> usize {
    (CLIENT_VAL_RATIO * part as f64).round() as usize
}

fn split_with(ids: &[u64], val: usize, seed: u64, tags: &[u64]) -> ClientSplit {
    let order = shuffled(ids, seed, tags);
    ClientSplit {
        val: sorted(order[..val].to_vec()),
        train: sorted(order[val..].to_vec()),
    }
}

/// Held-out test ids plus per-client train/validation splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test: Vec<u64>,
    pub clients: Vec<ClientSplit>,
}

impl SplitPlan {
    /// Checks that test, train and validation sets are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let all = self.test.iter().chain(
            self.clients
                .iter()
                .flat_map(|c| c.train.iter().chain(&c.val)),
        );
        for id in all {
            if !seen.insert(*id) {
                return Err(Error::Input(format!(
                    "sample {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    /// Every id in the plan.
    pub fn ids(&self) -> BTreeSet<u64> {
        self.test
            .iter()
            .chain(
                self.clients
                    .iter()
                    .flat_map(|c| c.train.iter().chain(&c.val)),
            )
            .copied()
            .collect()
    }
}

/// Splits every partition into validation (`round(41/372 * size)`) and training ids.
pub fn split_train_val(test: Vec<u64>, partition: &PartitionPlan) -> Result<SplitPlan> {
    let clients = partition
        .parts()
        .iter()
        .enumerate()
        .map(|(c, part)| {
            if part.is_empty() {
                return Err(Error::Config(format!(
                    "client {c} received an empty partition"
                )));
            }
            Ok(split_with(
                part,
                client_val_count(part.len()),
                partition.seed,
                &[rng::tag::VAL_SPLIT, c as u64],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = SplitPlan { test, clients };
    plan.validate()?;
    Ok(plan)
}

/// Train/validation split of pooled data for centralized training: `round(fraction * n)` validation ids.
pub fn pooled_split(ids: &[u64], fraction: f64, seed: u64) -> Result<ClientSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "validation fraction {fraction} must lie in [0, 1)"
        )));
    }
    if ids.is_empty() {
        return Err(Error::Config(
            "pooled split needs at least one sample".into(),
        ));
    }
    let val = (fraction * ids.len() as f64).round() as usize;
    Ok(split_with(ids, val, seed, &[rng::tag::VAL_SPLIT, POOLED]))
}

/// Full split plan for `n` samples with ids `0..n`.
pub fn plan_splits(
    n: usize,
    test_fraction: f64,
    n_clients: usize,
    seed: u64,
) -> Result<(SplitPlan, PartitionPlan)> {
    let ids: Vec<u64> = (0..n as u64).collect();
    let (test, rest) = split_test(&ids, test_fraction, seed)?;
    let partition = iid_partition(&rest, n_clients, seed)?;
    Ok((split_train_val(test, &partition)?, partition))
}
