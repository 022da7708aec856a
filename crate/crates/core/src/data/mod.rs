//! Synthetic dental-arch samples, splitting arithmetic and preprocessing.

mod preprocess;
mod split;
mod store;
mod synth;

pub use preprocess::{layout, preprocess_image, preprocess_mask, Layout};
pub use split::{
    client_val_count, iid_partition, plan_splits, pooled_split, split_test, split_train_val,
    test_count, ClientSplit, PartitionPlan, SplitPlan, CLIENT_VAL_RATIO,
};
pub use store::{
    export_dataset, import_dataset, read_pbm, read_pgm, write_pbm, write_pgm, DatasetEntry,
    DatasetManifest,
};
pub use synth::{generate_dataset, generate_sample, GenConfig};

use crate::error::Result;
use crate::image::{GrayImage, Mask};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// One radiograph-like image with its tooth masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub image: GrayImage,
    /// Pixel-wise OR of `instances`.
    pub union_mask: Mask,
    pub instances: Vec<Mask>,
}

/// A sample resized to the network input, ready for training or scoring.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub id: u64,
    /// `(1, 1, H, W)` intensities in [0, 1].
    pub image: Tensor<T>,
    /// `(1, 1, H, W)` binary target.
    pub target: Tensor<T>,
    pub mask: Mask,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(sample: &Sample, height: usize, width: usize) -> Result<Self> {
        let pixels = preprocess_image(&sample.image, height, width)?;
        let image = Tensor::from_f64(Shape::new(1, 1, height, width), &pixels)?;
        let mask = preprocess_mask(&sample.union_mask, height, width)?;
        Ok(Self {
            id: sample.id,
            image,
            target: mask.to_tensor(),
            mask,
        })
    }
}

/// Prepares every sample at `height x width`.
pub fn prepare_all<T: Scalar>(
    samples: &[Sample],
    height: usize,
    width: usize,
) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| Prepared::new(s, height, width))
        .collect()
}
