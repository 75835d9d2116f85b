//! Clean dataset generation and trigger/poisoning machinery.
//!
//! The built-in generator draws ten procedurally distinct grayscale glyph
//! classes (rings, bars, crosses, ...) with per-sample jitter and additive
//! noise - a self-contained stand-in for a digits corpus that small CNNs
//! classify at 95%+ accuracy. Real data can be ingested from IDX files
//! instead ([`load_idx`]). Triggers come in two families: a filled polygon
//! patch and a monotone intensity remap ([`trigger`]).
//!
//! All operations are pure functions of their inputs and seeds.

mod glyphs;
mod idx;
mod poison;
mod store;
pub mod trigger;

pub use idx::load_idx;
pub use poison::{poison_dataset, MixedDataset, PoisonPlan};
pub use store::{load_dataset, save_dataset, save_mixed_dataset};
pub use trigger::{apply_trigger, apply_trigger_jittered, intensity_lut, TriggerKind, TriggerSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One labeled grayscale image.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Shape [1, H, W], values in [0, 1].
    pub image: Tensor<f32>,
    pub label: usize,
}

/// A labeled set of single-channel images with a fixed class count.
/// Images are stored contiguously, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    h: usize,
    w: usize,
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    seed: Option<u64>,
}

impl Dataset {
    pub fn empty(h: usize, w: usize, num_classes: usize, seed: Option<u64>) -> Self {
        Dataset {
            h,
            w,
            num_classes,
            images: Vec::new(),
            labels: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.h * self.w;
        &self.images[i * px..(i + 1) * px]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let px = self.h * self.w;
        &mut self.images[i * px..(i + 1) * px]
    }

    pub fn push(&mut self, image: Vec<f32>, label: usize) -> Result<()> {
        if image.len() != self.h * self.w {
            return Err(Error::ShapeMismatch(format!(
                "image of {} pixels pushed into {}x{} dataset",
                image.len(),
                self.h,
                self.w
            )));
        }
        if label >= self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "pixel outside [0, 1] pushed into dataset".into(),
            ));
        }
        self.images.extend_from_slice(&image);
        self.labels.push(label);
        Ok(())
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            image: Tensor::from_parts(vec![1, self.h, self.w], self.image(i).to_vec()),
            label: self.labels[i],
        }
    }

    /// Batch tensor [len(indices), 1, H, W] gathering the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let px = self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_parts(vec![indices.len(), 1, self.h, self.w], data)
    }

    /// The whole dataset as one batch tensor.
    pub fn all_batch(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![self.len(), 1, self.h, self.w],
            self.images.clone(),
        )
    }

    pub(crate) fn raw_images(&self) -> &[f32] {
        &self.images
    }
}

/// Generate `k * n_per_class` clean glyph samples, class-major, deterministic
/// per seed. The label histogram is exactly uniform.
pub fn generate_clean(
    seed: u64,
    n_per_class: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Result<Dataset> {
    if h < 12 || w < 12 {
        return Err(Error::InvalidConfig(format!(
            "degenerate image dimensions {h}x{w}; need at least 12 px"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    if k == 0 || k > glyphs::GLYPH_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "class count {k} outside 1..={}",
            glyphs::GLYPH_CLASSES
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::empty(h, w, k, Some(seed));
    for class in 0..k {
        for _ in 0..n_per_class {
            let image = glyphs::paint(class, h, w, &mut rng);
            ds.push(image, class)?;
        }
    }
    Ok(ds)
}
