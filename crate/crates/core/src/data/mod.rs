//! Datasets, few-shot subset construction, augmentation and the on-disk
//! batch format.

mod augment;
mod batchfile;
mod loaders;

pub use augment::{augment, AugmentationPolicy, Transform};
pub use batchfile::{load_batch, save_batch};
pub use loaders::{load_dataset, DatasetFormat};

use ndarray::Array4;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::stage_rng;

pub type Label = u16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("synthetic budget {budget} is not divisible by {classes} classes")]
    NonDivisibleBudget { budget: usize, classes: usize },
    #[error("class {class} has only {available} examples, need {needed}")]
    InsufficientClassExamples { class: usize, available: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("unrecognized magic or unsupported version in {path}")]
    VersionMismatch { path: String },
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
}

/// (channels, height, width) of the canonical network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of float images in [0,1], optionally labeled.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// (B, C, H, W)
    pub images: Array4<f32>,
    pub labels: Option<Vec<Label>>,
}

impl ImageBatch {
    pub fn unlabeled(images: Array4<f32>) -> Self {
        ImageBatch { images, labels: None }
    }

    pub fn labeled(images: Array4<f32>, labels: Vec<Label>) -> Self {
        assert_eq!(images.shape()[0], labels.len(), "label count mismatch");
        ImageBatch { images, labels: Some(labels) }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape { c: s[1], h: s[2], w: s[3] }
    }

    /// New batch with the given rows, preserving labels when present.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let s = self.images.shape();
        let mut out = Array4::zeros((indices.len(), s[1], s[2], s[3]));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|ls| indices.iter().map(|&i| ls[i]).collect());
        ImageBatch { images: out, labels }
    }
}

/// Static description of a dataset: class count, canonical image shape
/// (pixels always in [0,1]) and split sizes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: ImageShape,
    pub train_count: usize,
    pub test_count: usize,
}

/// A dataset loaded into memory, already at the canonical shape.
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: ImageBatch,
    pub test: ImageBatch,
    pub policy: AugmentationPolicy,
}

/// Class-balanced labeled subset used for distillation.
#[derive(Debug, Clone)]
pub struct FewShotSet {
    pub images: Array4<f32>,
    pub labels: Vec<Label>,
    /// Indices into the full train split; unique.
    pub source_indices: Vec<usize>,
    pub seed: u64,
}

impl FewShotSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_batch(&self) -> ImageBatch {
        ImageBatch::labeled(self.images.clone(), self.labels.clone())
    }
}

/// Draws exactly `n / num_classes` examples per class, without
/// replacement, from the `fewshot` stream of `seed`.
pub fn build_few_shot(
    full_train: &ImageBatch,
    num_classes: usize,
    n: usize,
    seed: u64,
) -> Result<FewShotSet, DataError> {
    if n % num_classes != 0 {
        return Err(DataError::NonDivisibleBudget { budget: n, classes: num_classes });
    }
    let per_class = n / num_classes;
    let labels = full_train
        .labels
        .as_ref()
        .expect("few-shot construction requires a labeled train split");

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for (k, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(DataError::InsufficientClassExamples {
                class: k,
                available: members.len(),
                needed: per_class,
            });
        }
    }

    let mut rng = stage_rng(seed, "fewshot");
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();

    let batch = full_train.select(&chosen);
    Ok(FewShotSet {
        images: batch.images,
        labels: batch.labels.unwrap(),
        source_indices: chosen,
        seed,
    })
}

#[cfg(test)]
mod tests;
