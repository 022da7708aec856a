//! Overlap and surface-distance metrics on binary masks, plus model evaluation
//! on a held-out set.

use serde::{Deserialize, Serialize};

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dice coefficient `2|G∩P| / (|G|+|P|)`; 1 when both masks are empty.
pub fn dice(g: &Mask, p: &Mask) -> Result<f64> {
    let inter = g.intersection_count(p)?;
    let total = g.count() + p.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Jaccard index `|G∩P| / |G∪P|`; 1 when both masks are empty.
pub fn iou(g: &Mask, p: &Mask) -> Result<f64> {
    let inter = g.intersection_count(p)?;
    let union = g.count() + p.count() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Which pixels enter the Hausdorff maxima.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSet {
    #[default]
    Foreground,
    Boundary,
}

const FAR: f64 = 1e30;

/// Squared distances along one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `m`. Values are exact integers; background-only grids give `1e30`.
pub fn squared_distance_map(m: &Mask) -> Vec<f64> {
    let (h, w) = m.dims();
    let n = h.max(w);
    let mut grid: Vec<f64> = m
        .data()
        .iter()
        .map(|&b| if b != 0 { 0.0 } else { FAR })
        .collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

/// Distance from each foreground pixel of `from` to the nearest foreground pixel of `to`.
fn directed(from: &Mask, to: &Mask) -> Vec<f64> {
    let map = squared_distance_map(to);
    from.data()
        .iter()
        .zip(&map)
        .filter(|(b, _)| **b != 0)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn require_both(g: &Mask, p: &Mask, what: &str) -> Result<()> {
    if g.dims() != p.dims() {
        return Err(Error::Dimension(format!(
            "{what}: mask shapes {:?} and {:?} differ",
            g.dims(),
            p.dims()
        )));
    }
    if g.is_empty() || p.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs two non-empty masks"
        )));
    }
    Ok(())
}

fn point_masks(g: &Mask, p: &Mask, set: PointSet) -> (Mask, Mask) {
    match set {
        PointSet::Foreground => (g.clone(), p.clone()),
        PointSet::Boundary => (g.boundary(), p.boundary()),
    }
}

/// Symmetric Hausdorff distance over all foreground pixels.
pub fn hausdorff(g: &Mask, p: &Mask) -> Result<f64> {
    hausdorff_with(g, p, PointSet::Foreground)
}

pub fn hausdorff_with(g: &Mask, p: &Mask, set: PointSet) -> Result<f64> {
    require_both(g, p, "hausdorff")?;
    let (g, p) = point_masks(g, p, set);
    let a = directed(&g, &p).into_iter().fold(0.0, f64::max);
    let b = directed(&p, &g).into_iter().fold(0.0, f64::max);
    Ok(a.max(b))
}

/// 95th percentile of the pooled nearest-neighbour distances in both directions.
pub fn hd95(g: &Mask, p: &Mask) -> Result<f64> {
    hd95_with(g, p, PointSet::Foreground)
}

pub fn hd95_with(g: &Mask, p: &Mask, set: PointSet) -> Result<f64> {
    require_both(g, p, "hd95")?;
    let (g, p) = point_masks(g, p, set);
    let mut all = directed(&g, &p);
    all.extend(directed(&p, &g));
    Ok(percentile(&mut all, 95.0))
}

/// Average symmetric surface distance between the boundary sets.
pub fn assd(g: &Mask, p: &Mask) -> Result<f64> {
    require_both(g, p, "assd")?;
    let (gs, ps) = (g.boundary(), p.boundary());
    let a = directed(&gs, &ps);
    let b = directed(&ps, &gs);
    let n = (a.len() + b.len()) as f64;
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n)
}

/// Linear-interpolation percentile (`q` in [0, 100]); sorts `values` in place.
/// Returns NaN for an empty slice.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Per-image scores; distances are `None` when either mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: u64,
    pub dice: f64,
    pub iou: f64,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

impl MetricRecord {
    pub fn score(sample_id: u64, truth: &Mask, pred: &Mask) -> Result<Self> {
        let dice = dice(truth, pred)?;
        let iou = iou(truth, pred)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            sample_id,
            dice,
            iou,
            hd: defined(hausdorff(truth, pred))?,
            hd95: defined(hd95(truth, pred))?,
            assd: defined(assd(truth, pred))?,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Dice => Some(self.dice),
            Metric::Iou => Some(self.iou),
            Metric::Hd => self.hd,
            Metric::Hd95 => self.hd95,
            Metric::Assd => self.assd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Iou,
    Hd,
    Hd95,
    Assd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Dice,
        Metric::Iou,
        Metric::Hd,
        Metric::Hd95,
        Metric::Assd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Iou => "iou",
            Metric::Hd => "hd",
            Metric::Hd95 => "hd95",
            Metric::Assd => "assd",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Median, interquartile range and 95th percentile of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub median: f64,
    pub iqr: f64,
    pub p95: f64,
    pub count: usize,
    /// Records where the metric was undefined.
    pub skipped: usize,
}

pub fn summarize(records: &[MetricRecord]) -> Vec<MetricSummary> {
    Metric::ALL
        .iter()
        .map(|&metric| {
            let mut v: Vec<f64> = records.iter().filter_map(|r| r.get(metric)).collect();
            let skipped = records.len() - v.len();
            let q75 = percentile(&mut v, 75.0);
            let q25 = percentile(&mut v, 25.0);
            MetricSummary {
                metric,
                median: percentile(&mut v, 50.0),
                iqr: q75 - q25,
                p95: percentile(&mut v, 95.0),
                count: v.len(),
                skipped,
            }
        })
        .collect()
}

/// Median of one metric over the records where it is defined.
pub fn median(records: &[MetricRecord], metric: Metric) -> f64 {
    let mut v: Vec<f64> = records.iter().filter_map(|r| r.get(metric)).collect();
    percentile(&mut v, 50.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub records: Vec<MetricRecord>,
    pub summary: Vec<MetricSummary>,
}

const EVAL_BATCH: usize = 8;

/// Thresholded eval-mode predictions for `samples`, in order.
pub fn predict_masks<T: Scalar, M: Segmenter<T>>(
    model: &M,
    samples: &[Prepared<T>],
    threshold: f64,
) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.image).collect();
        let probs = model.predict(&Tensor::stack(&images)?)?;
        let s = probs.shape();
        for plane in probs.data().chunks(s.plane()) {
            out.push(Mask::from_probabilities(s.h, s.w, plane, threshold)?);
        }
    }
    Ok(out)
}

/// Scores the model on every sample; undefined distances are recorded, not fatal.
pub fn evaluate<T: Scalar, M: Segmenter<T>>(
    model: &M,
    samples: &[Prepared<T>],
    threshold: f64,
) -> Result<Evaluation> {
    let preds = predict_masks(model, samples, threshold)?;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| MetricRecord::score(s.id, &s.mask, p))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records);
    Ok(Evaluation { records, summary })
}
