//! Label manipulation (per-tooth dilation plus random tooth omission) and
//! image-quality manipulation (additive Gaussian noise).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    #[default]
    None,
    Label,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub kind: CorruptionKind,
    pub dilation_kernels: Vec<usize>,
    pub omission_prob: f64,
    pub noise_mu: f64,
    /// On the 8-bit intensity scale.
    pub noise_sigma: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::None,
            dilation_kernels: vec![3, 5, 7, 11],
            omission_prob: 0.10,
            noise_mu: 0.0,
            noise_sigma: 25.0,
        }
    }
}

impl CorruptionConfig {
    pub fn with_kind(kind: CorruptionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation_kernels.is_empty() {
            return Err(Error::Config("dilation_kernels must not be empty".into()));
        }
        if let Some(k) = self
            .dilation_kernels
            .iter()
            .find(|k| **k < 3 || **k % 2 == 0)
        {
            return Err(Error::Config(format!(
                "dilation kernel {k} must be odd and at least 3"
            )));
        }
        if !(0.0..=1.0).contains(&self.omission_prob) {
            return Err(Error::Config(format!(
                "omission_prob {} outside [0, 1]",
                self.omission_prob
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !self.noise_mu.is_finite() {
            return Err(Error::Config(
                "noise_sigma must be non-negative and noise_mu finite".into(),
            ));
        }
        Ok(())
    }
}

/// Max filter along one axis with half-width `r`.
fn spread(src: &[u8], h: usize, w: usize, r: usize, along_rows: bool) -> Vec<u8> {
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] == 0 {
                continue;
            }
            if along_rows {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    out[y * w + xx] = 1;
                }
            } else {
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    out[yy * w + x] = 1;
                }
            }
        }
    }
    out
}

/// Dilation with a `k x k` all-ones structuring element.
pub fn dilate(mask: &Mask, k: usize) -> Result<Mask> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "dilation kernel size {k} must be odd"
        )));
    }
    let (h, w) = mask.dims();
    if h == 0 || w == 0 {
        return Ok(mask.clone());
    }
    let r = k / 2;
    let rows = spread(mask.data(), h, w, r, true);
    Mask::from_vec(h, w, spread(&rows, h, w, r, false))
}

/// Dilates every instance with one randomly drawn kernel and, with
/// probability `omission_prob`, drops one random instance first.
pub fn corrupt_labels(sample: &Sample, cfg: &CorruptionConfig, rng: &mut Rng) -> Result<Sample> {
    if sample.instances.is_empty() {
        return Err(Error::Input(format!(
            "sample {} has no instances to corrupt",
            sample.id
        )));
    }
    let k = cfg.dilation_kernels[rng.gen_range(0..cfg.dilation_kernels.len())];
    let mut kept: Vec<&Mask> = sample.instances.iter().collect();
    if rng.gen_bool(cfg.omission_prob) {
        kept.remove(rng.gen_range(0..kept.len()));
    }
    let instances = kept
        .into_iter()
        .map(|m| dilate(m, k))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = sample.union_mask.dims();
    let union_mask = Mask::union_all(&instances)?.unwrap_or_else(|| Mask::new(h, w));
    Ok(Sample {
        id: sample.id,
        image: sample.image.clone(),
        union_mask,
        instances,
    })
}

/// Adds i.i.d. Gaussian noise per pixel, then clips to [0, 255] and rounds.
pub fn corrupt_image(sample: &Sample, cfg: &CorruptionConfig, rng: &mut Rng) -> Result<Sample> {
    let noise = Normal::new(cfg.noise_mu, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut image = sample.image.clone();
    for v in image.data_mut() {
        let x = *v as f64 + noise.sample(rng);
        *v = x.clamp(0.0, 255.0).round() as u8;
    }
    Ok(Sample {
        image,
        ..sample.clone()
    })
}

/// Applies the configured corruption to every sample, each with its own
/// stream derived from `(seed, sample id)`.
pub fn corrupt_all(samples: &[Sample], cfg: &CorruptionConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    samples
        .iter()
        .map(|s| match cfg.kind {
            CorruptionKind::None => Ok(s.clone()),
            CorruptionKind::Label => corrupt_labels(
                s,
                cfg,
                &mut rng::stream(seed, &[rng::tag::LABEL_NOISE, s.id]),
            ),
            CorruptionKind::Image => corrupt_image(
                s,
                cfg,
                &mut rng::stream(seed, &[rng::tag::IMAGE_NOISE, s.id]),
            ),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_pixel_grows_to_block() {
        let m = Mask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let d = dilate(&m, 3).unwrap();
        assert_eq!(
            d,
            Mask::from_fn(5, 5, |y, x| (1..=3).contains(&y) && (1..=3).contains(&x))
        );
        let full = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(dilate(&full, 5).unwrap(), full);
        assert!(matches!(dilate(&m, 4), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(CorruptionConfig::default().validate().is_ok());
        for bad in [
            CorruptionConfig {
                dilation_kernels: vec![4],
                ..Default::default()
            },
            CorruptionConfig {
                dilation_kernels: vec![1],
                ..Default::default()
            },
            CorruptionConfig {
                omission_prob: 1.5,
                ..Default::default()
            },
            CorruptionConfig {
                noise_sigma: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
