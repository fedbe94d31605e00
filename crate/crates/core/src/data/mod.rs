//! Image datasets: CIFAR-10 binary batches, procedural shapes, splitting,
//! augmentation and ZCA whitening.

mod augment;
mod cifar;
mod shapes;
mod zca;

use rand::seq::SliceRandom;

pub use augment::{augment, rotate, shift, AugmentConfig, Resample};
pub use cifar::{encode_cifar_record, load_cifar10, parse_cifar_batch, CIFAR_CLASSES, CIFAR_RECORD_BYTES};
pub use shapes::{generate_shapes, load_dataset, save_dataset, ShapesConfig, SHAPE_KINDS};
pub use zca::ZcaTransform;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// One image (channels × H × W, values in [0,1] before whitening) and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor,
    pub label: usize,
}

impl ImageRecord {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Disjoint train/validation/test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// (channels, height, width) of the records.
    pub fn image_shape(&self) -> Result<[usize; 3]> {
        let r = self
            .train
            .first()
            .or(self.validation.first())
            .or(self.test.first())
            .ok_or_else(|| Error::invalid("empty dataset"))?;
        Ok([r.channels(), r.height(), r.width()])
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sizes of a 60/20/20 partition of `n` records.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Shuffles with `seed` and partitions 60/20/20.
pub fn split_records(mut records: Vec<ImageRecord>, class_names: Vec<String>, seed: u64) -> DatasetSplit {
    let mut rng = rng::stream(seed, streams::SPLIT);
    records.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(records.len());
    let test = records.split_off(n_train + n_val);
    let validation = records.split_off(n_train);
    DatasetSplit {
        train: records,
        validation,
        test,
        class_names,
        seed,
    }
}

/// Stacks records into an (n, c, h, w) batch.
pub fn batch_pixels(records: &[&ImageRecord]) -> Result<Tensor> {
    let items: Vec<Tensor> = records.iter().map(|r| r.pixels.clone()).collect();
    Tensor::stack(&items)
}
