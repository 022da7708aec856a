use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};
use crate::rng::{self, Rng};

/// Parameters of the synthetic dental-arch generator. Lengths are fractions
/// of the image height or width unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub min_teeth: usize,
    pub max_teeth: usize,
    /// Horizontal extent of the arches.
    pub arch_span: f64,
    /// Vertical sag of the occlusal curve at the centre.
    pub arch_sag: f64,
    /// Tooth semi-length.
    pub tooth_length: f64,
    /// Tooth semi-width relative to the slot width along the arch.
    pub tooth_fill: f64,
    /// Root half-width at the apex relative to the crown.
    pub root_taper: f64,
    /// Positional jitter relative to the slot width.
    pub jitter: f64,
    /// Maximum tilt in radians.
    pub tilt: f64,
    /// Background gray range at the darkest corner.
    pub background: (f64, f64),
    /// Peak-to-peak background gradient.
    pub gradient: f64,
    /// Texture amplitude in gray levels.
    pub texture: f64,
    /// Tooth brightness above the local background.
    pub contrast: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 104,
            min_teeth: 8,
            max_teeth: 16,
            arch_span: 0.78,
            arch_sag: 0.08,
            tooth_length: 0.15,
            tooth_fill: 0.36,
            root_taper: 0.45,
            jitter: 0.06,
            tilt: 0.12,
            background: (45.0, 80.0),
            gradient: 25.0,
            texture: 6.0,
            contrast: (55.0, 90.0),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_teeth == 0 || self.max_teeth < self.min_teeth {
            return Err(Error::Config(format!(
                "tooth count range {}..={} is degenerate",
                self.min_teeth, self.max_teeth
            )));
        }
        if self.min_teeth < 2 {
            return Err(Error::Config("each arch needs at least one tooth".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image {}x{} is too small",
                self.height, self.width
            )));
        }
        let fractions = [
            self.arch_span,
            self.arch_sag,
            self.tooth_length,
            self.tooth_fill,
            self.root_taper,
            self.jitter,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || self.tooth_length == 0.0
            || self.tooth_fill == 0.0
        {
            return Err(Error::Config(
                "generator fractions must lie in (0, 1]".into(),
            ));
        }
        if self.contrast.0 < 30.0 || self.contrast.1 < self.contrast.0 {
            return Err(Error::Config(
                "tooth contrast must be at least 30 gray levels".into(),
            ));
        }
        if self.background.1 < self.background.0 || self.background.0 < 0.0 {
            return Err(Error::Config("background range is invalid".into()));
        }
        if self.background.1 + self.gradient + self.texture + self.contrast.1 > 255.0 {
            return Err(Error::Config("intensity ranges exceed 8 bits".into()));
        }
        Ok(())
    }
}

/// One tooth in image coordinates: centre, unit axis pointing to the root,
/// semi-length and crown semi-width.
#[derive(Clone, Copy, Debug)]
struct Tooth {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    len: f64,
    half_width: f64,
    taper: f64,
}

impl Tooth {
    /// Signed position along the axis in [-1, 1] (crown to apex) when inside.
    fn inside(&self, y: f64, x: f64) -> Option<f64> {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dy * self.ay + dx * self.ax) / self.len;
        let v = -dy * self.ax + dx * self.ay;
        if u.abs() > 1.0 {
            return None;
        }
        let width = if u <= 0.0 {
            self.half_width
        } else {
            self.half_width * (1.0 - (1.0 - self.taper) * u)
        };
        (u * u + (v / width).powi(2) <= 1.0).then_some(u)
    }
}

/// Smooth lattice noise in [-1, 1] with cell size `cell` pixels.
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(h: usize, w: usize, cell: f64, rng: &mut Rng) -> Self {
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cell, cols, values }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (fy, fx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn place_teeth(cfg: &GenConfig, rng: &mut Rng) -> Vec<Tooth> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let total = rng.gen_range(cfg.min_teeth..=cfg.max_teeth);
    let upper = total.div_ceil(2);
    let counts = [upper, total - upper];
    let span = w * cfg.arch_span * rng.gen_range(0.92..1.0);
    let cx = w / 2.0 + rng.gen_range(-0.03..0.03) * w;
    let occlusal = h / 2.0 + rng.gen_range(-0.04..0.04) * h;
    let sag = cfg.arch_sag * h * rng.gen_range(0.7..1.3);
    let len = cfg.tooth_length * h;
    let gap = 0.03 * h;
    // occlusal curve y(x) = occlusal + sag * (1 - s^2), s = (x - cx) / (span / 2)
    let curve = |x: f64| {
        let s = (x - cx) / (span / 2.0);
        (
            occlusal + sag * (1.0 - s * s),
            -2.0 * sag * s / (span / 2.0),
        )
    };
    let mut teeth = Vec::with_capacity(total);
    for (arch, &count) in counts.iter().enumerate() {
        let slot = span / count as f64;
        let side = if arch == 0 { -1.0 } else { 1.0 };
        for i in 0..count {
            let x = cx - span / 2.0
                + slot * (i as f64 + 0.5)
                + rng.gen_range(-1.0..1.0) * cfg.jitter * slot;
            let (y, slope) = curve(x);
            // unit normal of the curve, pointing away from the occlusal plane
            let norm = (1.0 + slope * slope).sqrt();
            let (ny, nx) = (side / norm, -side * slope / norm);
            let tilt = rng.gen_range(-cfg.tilt..=cfg.tilt);
            let (ay, ax) = (
                ny * tilt.cos() - nx * tilt.sin(),
                ny * tilt.sin() + nx * tilt.cos(),
            );
            let this_len = len * rng.gen_range(0.85..1.1);
            let offset = this_len + gap / 2.0;
            teeth.push(Tooth {
                cy: y + ay * offset,
                cx: x + ax * offset,
                ay,
                ax,
                len: this_len,
                half_width: cfg.tooth_fill * slot * rng.gen_range(0.85..1.0),
                taper: cfg.root_taper,
            });
        }
    }
    teeth
}

/// Generates sample `id`; the result depends only on `(seed, id, cfg)`.
pub fn generate_sample(id: u64, seed: u64, cfg: &GenConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::SAMPLE, id]);
    let (h, w) = (cfg.height, cfg.width);
    let teeth = place_teeth(cfg, &mut rng);

    let base = rng.gen_range(cfg.background.0..=cfg.background.1);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (gy, gx) = (angle.sin(), angle.cos());
    let coarse = ValueNoise::new(h, w, 8.0, &mut rng);
    let fine = ValueNoise::new(h, w, 3.0, &mut rng);
    let brightness: Vec<f64> = teeth
        .iter()
        .map(|_| rng.gen_range(cfg.contrast.0..=cfg.contrast.1))
        .collect();

    let mut instances: Vec<Mask> = teeth.iter().map(|_| Mask::new(h, w)).collect();
    let mut image = GrayImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // gradient in [0, 1] along a random direction
            let ramp = 0.5
                + 0.5
                    * ((py / h as f64 - 0.5) * gy + (px / w as f64 - 0.5) * gx)
                    * std::f64::consts::SQRT_2;
            let texture = cfg.texture * (0.65 * coarse.at(py, px) + 0.35 * fine.at(py, px));
            let mut v = base + cfg.gradient * ramp.clamp(0.0, 1.0) + texture;
            let mut lift: f64 = 0.0;
            for (t, tooth) in teeth.iter().enumerate() {
                if let Some(u) = tooth.inside(py, px) {
                    instances[t].set(y, x, true);
                    // enamel crown slightly brighter than the root
                    let shade = if u < 0.0 { 1.0 } else { 1.0 - 0.15 * u };
                    lift = lift.max(brightness[t] * shade);
                }
            }
            v += lift;
            image.set(y, x, v.clamp(0.0, 255.0).round() as u8);
        }
    }
    instances.retain(|m| !m.is_empty());
    if instances.is_empty() {
        return Err(Error::Config(format!(
            "sample {id}: no tooth fell inside the image"
        )));
    }
    let union_mask = Mask::union_all(&instances)?.expect("at least one instance");
    Ok(Sample {
        id,
        image,
        union_mask,
        instances,
    })
}

/// Samples with ids `0..n`, generated in parallel.
pub fn generate_dataset(n: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|id| generate_sample(id, seed, cfg))
        .collect()
}
