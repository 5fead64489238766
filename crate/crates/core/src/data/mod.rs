//! Dataset ingestion, class-incremental task splits and batching.

mod cifar;
mod split;
pub mod synthetic;

use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use split::{build_split, ClassMap, TaskSpec};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};

/// Images stored `n x H x W x C` in single precision with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> Array3<f64> {
        self.images.index_axis(Axis(0), index).mapv(f64::from)
    }

    /// Indices of samples whose label is in `classes`, ascending.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let (_, h, w, c) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), h, w, c));
        for (dst, &src) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), dst)
                .assign(&self.images.index_axis(Axis(0), src));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    /// SHA-256 over labels and raw image bits of both partitions.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [&self.train, &self.test] {
            hasher.update((part.len() as u64).to_le_bytes());
            for &l in &part.labels {
                hasher.update((l as u64).to_le_bytes());
            }
            for &v in part.images.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic` or `cifar100`.
    pub name: String,
    /// Directory holding `train.bin` / `test.bin` for file-backed datasets.
    pub path: Option<String>,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub base_classes: usize,
    pub classes_per_task: usize,
    pub num_incremental_tasks: usize,
    pub class_order_seed: u64,
    pub augment: bool,
    /// Zero padding used by the random crop augmentation.
    pub crop_padding: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            path: None,
            num_classes: 10,
            train_per_class: 80,
            test_per_class: 20,
            seed: 7,
            base_classes: 4,
            classes_per_task: 3,
            num_incremental_tasks: 2,
            class_order_seed: 1993,
            augment: true,
            crop_padding: 2,
        }
    }
}

/// Loads the named dataset. `image_size` and `channels` shape the synthetic
/// generator and are checked against file-backed data.
pub fn load_dataset(config: &DataConfig, image_size: usize, channels: usize) -> Result<DataSplit> {
    let split = match config.name.as_str() {
        "synthetic" => {
            let per_class = config.train_per_class + config.test_per_class;
            let all = synthetic::generate(&SyntheticSpec {
                num_classes: config.num_classes,
                samples_per_class: per_class,
                image_size,
                channels,
                seed: config.seed,
            });
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..all.len()).partition(|i| i % per_class < config.train_per_class);
            DataSplit {
                train: all.select(&train),
                test: all.select(&test),
            }
        }
        "cifar100" => {
            let path = config.path.as_deref().ok_or_else(|| Error::Ingestion {
                path: "<unset>".into(),
                message: "cifar100 requires data.path".into(),
            })?;
            let (train, test) = cifar::load_dir(Path::new(path))?;
            DataSplit { train, test }
        }
        other => {
            return Err(Error::Ingestion {
                path: config.path.clone().unwrap_or_else(|| other.to_string()),
                message: format!("unknown dataset `{other}` (expected synthetic or cifar100)"),
            })
        }
    };
    let (_, h, w, c) = split.train.images.dim();
    if h != image_size || w != image_size || c != channels {
        return Err(Error::Ingestion {
            path: config.path.clone().unwrap_or_else(|| config.name.clone()),
            message: format!(
                "images are {h}x{w}x{c}, model expects {image_size}x{image_size}x{channels}"
            ),
        });
    }
    Ok(split)
}

/// A mini-batch of images in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
    /// Positions in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(dataset: &Dataset, indices: &[usize]) -> Batch {
        Batch {
            images: indices.iter().map(|&i| dataset.image(i)).collect(),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }
}

/// Shuffles `indices` and cuts them into batches of `batch_size`. A trailing
/// single sample is folded into the previous batch so that every batch can
/// be split in two.
pub fn epoch_batches<R: Rng + ?Sized>(
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Random horizontal flip followed by a random crop from the zero-padded image.
pub fn augment<R: Rng + ?Sized>(
    image: ArrayView3<'_, f64>,
    padding: usize,
    rng: &mut R,
) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * padding);
    let dx = rng.random_range(0..=2 * padding);
    let mut padded = Array3::zeros((h + 2 * padding, w + 2 * padding, c));
    padded
        .slice_mut(s![padding..padding + h, padding..padding + w, ..])
        .assign(&image);
    let mut out = padded.slice(s![dy..dy + h, dx..dx + w, ..]).to_owned();
    if flip {
        out.invert_axis(Axis(1));
        out = out.as_standard_layout().to_owned();
    }
    out
}

#[cfg(test)]
mod tests;
