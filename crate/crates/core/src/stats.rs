//! Paired Wilcoxon signed-rank tests, Bonferroni correction and the
//! paradigm/configuration comparison tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::federation::{Configuration, ModelKey, Paradigm};
use crate::metrics::{Metric, MetricRecord};

/// Largest number of non-zero differences evaluated exactly.
pub const EXACT_LIMIT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n_effective: usize,
    pub method: Method,
    /// `p_value < 0.05`; comparison tables re-flag at the corrected level.
    pub significant: bool,
}

/// Non-zero differences `x - y` with their mid-ranks doubled to integers.
struct Ranked {
    positive: Vec<bool>,
    doubled_ranks: Vec<u64>,
    tie_sizes: Vec<usize>,
}

fn rank(x: &[f64], y: &[f64]) -> Result<Ranked> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Input("paired test needs at least one pair".into()));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("paired differences must be finite".into()));
    }
    d.retain(|v| *v != 0.0);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut doubled_ranks = vec![0; d.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean, doubled: i+j+2
        for &k in &order[i..=j] {
            doubled_ranks[k] = (i + j + 2) as u64;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    Ok(Ranked {
        positive: d.iter().map(|v| *v > 0.0).collect(),
        doubled_ranks,
        tie_sizes,
    })
}

fn sums(r: &Ranked) -> (u64, u64) {
    let plus = r
        .doubled_ranks
        .iter()
        .zip(&r.positive)
        .filter(|(_, p)| **p)
        .map(|(k, _)| k)
        .sum();
    let total: u64 = r.doubled_ranks.iter().sum();
    (plus, total - plus)
}

fn degenerate() -> TestResult {
    TestResult {
        statistic: 0.0,
        w_plus: 0.0,
        w_minus: 0.0,
        p_value: 1.0,
        n_effective: 0,
        method: Method::Exact,
        significant: false,
    }
}

fn result(r: &Ranked, p: f64, method: Method) -> TestResult {
    let (plus, minus) = sums(r);
    let p_value = p.clamp(0.0, 1.0);
    TestResult {
        statistic: plus.min(minus) as f64 / 2.0,
        w_plus: plus as f64 / 2.0,
        w_minus: minus as f64 / 2.0,
        p_value,
        n_effective: r.doubled_ranks.len(),
        method,
        significant: p_value < 0.05,
    }
}

fn exact_p(r: &Ranked) -> f64 {
    let (plus, minus) = sums(r);
    let total = (plus + minus) as usize;
    // count[s]: sign assignments whose doubled positive rank sum is s
    let mut count = vec![0.0f64; total + 1];
    count[0] = 1.0;
    let mut reach = 0;
    for &k in &r.doubled_ranks {
        let k = k as usize;
        for s in (0..=reach).rev() {
            if count[s] != 0.0 {
                count[s + k] += count[s];
            }
        }
        reach += k;
    }
    let lo = plus.min(minus) as usize;
    let tail: f64 = count[..=lo].iter().sum();
    let all = 2f64.powi(r.doubled_ranks.len() as i32);
    (2.0 * tail / all).min(1.0)
}

fn normal_p(r: &Ranked) -> f64 {
    let n = r.doubled_ranks.len() as f64;
    let (plus, _) = sums(r);
    let w = plus as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    let ties: f64 = r.tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * (1.0 - std.cdf(z))
}

/// Two-sided signed-rank test on `x - y`: exact up to [`EXACT_LIMIT`]
/// non-zero differences, normal approximation beyond.
pub fn wilcoxon_two_sided(x: &[f64], y: &[f64]) -> Result<TestResult> {
    let r = rank(x, y)?;
    match r.doubled_ranks.len() {
        0 => Ok(degenerate()),
        n if n <= EXACT_LIMIT => Ok(result(&r, exact_p(&r), Method::Exact)),
        _ => Ok(result(&r, normal_p(&r), Method::NormalApprox)),
    }
}

/// Exact p-value at any sample size, by counting rank sums.
pub fn wilcoxon_exact(x: &[f64], y: &[f64]) -> Result<TestResult> {
    let r = rank(x, y)?;
    if r.doubled_ranks.is_empty() {
        return Ok(degenerate());
    }
    Ok(result(&r, exact_p(&r), Method::Exact))
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_normal(x: &[f64], y: &[f64]) -> Result<TestResult> {
    let r = rank(x, y)?;
    if r.doubled_ranks.is_empty() {
        return Ok(degenerate());
    }
    Ok(result(&r, normal_p(&r), Method::NormalApprox))
}

/// Bonferroni-corrected significance level.
pub fn bonferroni(alpha: f64, n_tests: usize) -> Result<f64> {
    if n_tests == 0 {
        return Err(Error::Input("bonferroni needs at least one test".into()));
    }
    Ok(alpha / n_tests as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    WithinConfiguration,
    WithinParadigm,
}

/// One row of a significance table: a model pair tested on every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub family: Family,
    pub first: ModelKey,
    pub second: ModelKey,
    pub results: BTreeMap<Metric, TestResult>,
    /// Per-metric flag at the corrected level.
    pub significant: BTreeMap<Metric, bool>,
}

impl ComparisonRow {
    pub fn label(&self) -> String {
        match self.family {
            Family::WithinConfiguration => format!(
                "{}: {} vs {}",
                self.first.configuration,
                self.first.paradigm_label(),
                self.second.paradigm_label()
            ),
            Family::WithinParadigm => format!(
                "{}: {} vs {}",
                self.first.paradigm_label(),
                self.first.configuration,
                self.second.configuration
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSuite {
    pub alpha: f64,
    pub alpha_corrected: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Model pairs compared for the configurations present in `available`.
/// Every configuration must provide CL and FL, and LL0 unless it is the exclusion run.
pub fn planned_pairs(available: &[ModelKey]) -> Result<Vec<(Family, ModelKey, ModelKey)>> {
    let mut configs: Vec<Configuration> = available.iter().map(|k| k.configuration).collect();
    configs.sort();
    configs.dedup();
    let need = |c: Configuration, p: Paradigm| -> Result<ModelKey> {
        let k = ModelKey::new(c, p);
        if available.contains(&k) {
            Ok(k)
        } else {
            Err(Error::Suite(format!(
                "missing model {} ({c})",
                k.paradigm_label()
            )))
        }
    };
    let (ll0, cl, fl) = (
        Paradigm::Local(0),
        Paradigm::Centralized,
        Paradigm::Federated,
    );
    let mut pairs = Vec::new();
    for &c in &configs {
        if c != Configuration::Exclusion {
            pairs.push((Family::WithinConfiguration, need(c, ll0)?, need(c, cl)?));
            pairs.push((Family::WithinConfiguration, need(c, ll0)?, need(c, fl)?));
        }
        pairs.push((Family::WithinConfiguration, need(c, cl)?, need(c, fl)?));
    }
    if configs.contains(&Configuration::Baseline) {
        let base = Configuration::Baseline;
        for &other in configs.iter().filter(|c| **c != base) {
            pairs.push((Family::WithinParadigm, need(base, cl)?, need(other, cl)?));
            pairs.push((Family::WithinParadigm, need(base, fl)?, need(other, fl)?));
            if other != Configuration::Exclusion {
                pairs.push((Family::WithinParadigm, need(base, ll0)?, need(other, ll0)?));
            }
        }
    }
    Ok(pairs)
}

fn aligned(a: &[MetricRecord], b: &[MetricRecord], metric: Metric) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.sample_id != y.sample_id) {
        return Err(Error::Suite(
            "metric tables are not aligned by sample id".into(),
        ));
    }
    Ok(a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some((x.get(metric)?, y.get(metric)?)))
        .unzip())
}

/// Runs every planned comparison on all five metrics. The corrected level
/// divides `alpha` by the number of realized comparison rows.
pub fn comparison_suite(
    tables: &BTreeMap<ModelKey, Vec<MetricRecord>>,
    alpha: f64,
) -> Result<ComparisonSuite> {
    let keys: Vec<ModelKey> = tables.keys().copied().collect();
    let pairs = planned_pairs(&keys)?;
    let alpha_corrected = bonferroni(alpha, pairs.len().max(1))?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (family, first, second) in pairs {
        let mut results = BTreeMap::new();
        let mut significant = BTreeMap::new();
        for metric in Metric::ALL {
            let (x, y) = aligned(&tables[&first], &tables[&second], metric)?;
            let r = if x.is_empty() {
                degenerate()
            } else {
                wilcoxon_two_sided(&x, &y)?
            };
            significant.insert(metric, r.p_value < alpha_corrected);
            results.insert(metric, r);
        }
        rows.push(ComparisonRow {
            family,
            first,
            second,
            results,
            significant,
        });
    }
    Ok(ComparisonSuite {
        alpha,
        alpha_corrected,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_two_sided(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let r = wilcoxon_two_sided(&[0.5, 0.7], &[0.5, 0.7]).unwrap();
        assert_eq!(
            (r.p_value, r.n_effective, r.method),
            (1.0, 0, Method::Exact)
        );
    }

    #[test]
    fn mid_ranks_for_ties() {
        let r = rank(&[1.0, -1.0, 2.0, 0.0], &[0.0; 4]).unwrap();
        assert_eq!(r.doubled_ranks, vec![3, 3, 6]);
        assert_eq!(r.tie_sizes, vec![2, 1]);
    }

    #[test]
    fn bonferroni_values() {
        assert_eq!(bonferroni(0.05, 1).unwrap(), 0.05);
        assert_eq!(bonferroni(0.10, 4).unwrap(), 0.025);
        assert!(bonferroni(0.05, 0).is_err());
    }
}
