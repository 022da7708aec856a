//! 8-bit grayscale images and binary masks on a row-major grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Binary `h x w` grid stored as bytes in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        Self { h, w, data }
    }

    /// Thresholds probabilities (`p >= threshold` is foreground).
    pub fn from_probabilities<T: Scalar>(
        h: usize,
        w: usize,
        probs: &[T],
        threshold: f64,
    ) -> Result<Self> {
        if probs.len() != h * w {
            return Err(Error::Dimension(format!(
                "{} probabilities for a {h}x{w} mask",
                probs.len()
            )));
        }
        let t = T::of(threshold);
        Ok(Self {
            h,
            w,
            data: probs.iter().map(|&p| (p >= t) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.w + x] = on as u8;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    fn same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "mask shapes {}x{} and {}x{} differ",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Mask {
            data,
            h: self.h,
            w: self.w,
        })
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a & **b != 0)
            .count())
    }

    /// Pixel-wise OR of equally sized masks; `None` for an empty list.
    pub fn union_all<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Option<Mask>> {
        let mut acc: Option<Mask> = None;
        for m in masks {
            acc = Some(match acc {
                None => m.clone(),
                Some(a) => a.union(m)?,
            });
        }
        Ok(acc)
    }

    /// Foreground coordinates `(row, col)` in raster order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.h)
            .flat_map(|y| (0..self.w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.get(y, x))
            .collect()
    }

    /// Foreground pixels with a 4-neighbour in the background or on the grid border.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.h, self.w);
        Mask::from_fn(h, w, |y, x| {
            self.get(y, x)
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1))
        })
    }

    /// `(1, 1, h, w)` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| if v != 0 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(Shape::new(1, 1, self.h, self.w), data).expect("length matches")
    }
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!(
                "image {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}
