//! Datasets: samples, class-folder ingestion, the synthetic generator,
//! checkpoints.

pub mod checkpoint;
pub mod image;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use image::{load_image_folder, read_pnm, resize_bilinear, write_dataset, write_ppm, FolderLoad};
pub use synthetic::{generate_synthetic, PALETTE};

/// A filled circle painted by the synthetic generator, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disc {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// File path, or `"synthetic"`.
    pub source: String,
    /// Ground-truth lesion geometry, known only for generated samples.
    pub lesions: Vec<Disc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let mut sorted = class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != class_names.len() {
            return Err(Error::Data("class names must be unique".into()));
        }
        let k = class_names.len();
        let size = samples.first().map(|s| s.image.shape().to_vec());
        for s in &samples {
            if s.label >= k {
                return Err(Error::Data(format!("{}: label {} outside {k} classes", s.source, s.label)));
            }
            if !s.image.is_finite() {
                return Err(Error::Data(format!("{}: non-finite pixels", s.source)));
            }
            if Some(s.image.shape().to_vec()) != size || s.image.rank() != 3 || s.image.shape()[0] != 3 {
                return Err(Error::Data(format!("{}: image shape {:?} differs", s.source, s.image.shape())));
            }
        }
        Ok(Self { samples, class_names })
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

    /// `(height, width)` of the images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Stacks the selected images into a `[B, 3, H, W]` batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let first = indices.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let shape = self.samples[*first].image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.image.data().iter().map(|&v| T::c(v as f64)));
            labels.push(s.label);
        }
        Ok((Tensor::new(&[indices.len(), shape[0], shape[1], shape[2]], data)?, labels))
    }
}
