//! In-memory image datasets, the train/validation split and mini-batch
//! streams.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::{augment, AugmentPolicy, ImageDims};
use crate::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images stored row-major as `(count, rows, cols, channels)` reals in
/// `[0, 1]` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: ImageDims,
    pixels: Vec<f32>,
    labels: Vec<u8>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(dims: ImageDims, pixels: Vec<f32>, labels: Vec<u8>, classes: usize, split: Split) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Input("images must have at least one pixel".into()));
        }
        if pixels.len() != labels.len() * dims.len() {
            return Err(Error::Input(format!(
                "{} pixel values for {} images of {} pixels",
                pixels.len(),
                labels.len(),
                dims.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Input(format!("label {} of image {i} outside [0, {classes})", labels[i])));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input(format!("pixel value {} at index {i} outside [0, 1]", pixels[i])));
        }
        Ok(Dataset {
            dims,
            pixels,
            labels,
            classes,
            split,
        })
    }

    /// Raw bytes divided by 255.
    pub fn from_bytes(dims: ImageDims, bytes: &[u8], labels: Vec<u8>, classes: usize, split: Split) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(dims, pixels, labels, classes, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.dims.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(indices.len() * self.dims.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} outside dataset of {}", self.len())));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            dims: self.dims,
            pixels,
            labels,
            classes: self.classes,
            split,
        })
    }

    /// The first `n` images (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            pixels: self.pixels[..n * self.dims.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Seeded disjoint split into 90% training and 10% validation images.
    pub fn split_train_val(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[0x5b11])));
        let n_val = (self.len() + 5) / 10;
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train, Split::Train)?, self.subset(val, Split::Val)?))
    }

    /// `(B, rows, cols, channels)` tensor of the images at `indices`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let d = self.dims;
        let mut data = Vec::with_capacity(indices.len() * d.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[indices.len(), d.rows, d.cols, d.channels], data)
    }

    /// One epoch of shuffled, augmented mini-batches. The permutation depends
    /// on `(seed, epoch)`; each sample's augmentation on `(seed, epoch,
    /// sample index)`.
    pub fn batches<'a>(
        &'a self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        policy: &AugmentPolicy,
    ) -> Result<Batches<'a>> {
        if self.is_empty() {
            return Err(Error::Input("cannot draw batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        policy.validate()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[epoch, 1])));
        Ok(Batches {
            data: self,
            order,
            next: 0,
            batch_size,
            seed,
            epoch,
            policy: *policy,
        })
    }
}

/// One mini-batch: `(B, rows, cols, channels)` images and their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples.
    pub indices: Vec<usize>,
}

/// Iterator over one epoch; the last batch may be short.
#[derive(Debug)]
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    policy: AugmentPolicy,
}

impl Batches<'_> {
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn build(&self, indices: &[usize]) -> Result<Batch> {
        let images = if self.policy.is_identity() {
            self.data.batch_tensor(indices)?
        } else {
            let out = self.policy.output_dims(self.data.dims);
            let mut data = Vec::with_capacity(indices.len() * out.len());
            for &i in indices {
                let mut rng = rng_from_seed(derive_seed(self.seed, &[self.epoch, 2, i as u64]));
                let (img, _) = augment(self.data.image(i), self.data.dims, &self.policy, &mut rng)?;
                data.extend_from_slice(&img);
            }
            Tensor::from_vec(&[indices.len(), out.rows, out.cols, out.channels], data)?
        };
        Ok(Batch {
            images,
            labels: indices.iter().map(|&i| self.data.label(i)).collect(),
            indices: indices.to_vec(),
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = self.order[self.next..end].to_vec();
        self.next = end;
        Some(self.build(&idx))
    }
}
