//! Datasets and the files they live in.

mod index;
pub mod raster;
mod resize;
mod split;
pub mod synthetic;
pub mod weights;

pub use index::{load_dataset, write_dataset, DatasetIndex};
pub use resize::resize_bilinear;
pub use split::{split_train_val, split_two_fold};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use weights::{load_weights, save_weights};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image, `C×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let k = class_names.len();
        if let Some(s) = samples.iter().find(|s| s.label >= k) {
            return Err(Error::Config(format!("sample {} has label {} but only {k} classes", s.id, s.label)));
        }
        if let Some(s) = samples.iter().find(|s| s.image.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("sample {} has non-finite pixels", s.id)));
        }
        Ok(Dataset { class_names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// `N×C×H×W` batch of the given samples.
    pub fn batch(samples: &[&Sample]) -> Result<Tensor> {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Tensor::stack(&images)
    }
}
