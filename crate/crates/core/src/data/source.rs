use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{ClafError, Result};
use crate::rng;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "CLAF_DATA_DIR";

/// Any labeled image collection addressable by index.
pub trait SourceDataset: Send + Sync {
    fn name(&self) -> String;
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn image(&self, index: usize) -> Image;
    fn image_shape(&self) -> (usize, usize, usize);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl InMemoryDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(ClafError::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ClafError::ClassOutOfRange { class: bad, num_classes });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(ClafError::Dataset("images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }
}

impl SourceDataset for InMemoryDataset {
    fn name(&self) -> String {
        "in-memory".into()
    }

    fn len(&self) -> usize {
        self.images.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Image {
        self.images[index].clone()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.images.first().map(Image::shape).unwrap_or((0, 0, 0))
    }
}

/// Procedural texture dataset for desk-scale experiments.
///
/// Class `k` draws from pattern family `k % 4` (horizontal stripes, vertical
/// stripes, checkerboard, concentric rings) at frequency band `k / 4`, with
/// random phase, colours, and additive Gaussian noise. The families survive
/// flips, crops, moderate rotation/shear, and colour transforms, so every
/// augmentation in the pipelines is label preserving. Images are generated on
/// demand from `(seed, index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapes {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticShapes {
    pub fn new(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            size,
            noise: 0.1,
            seed,
        }
    }

    fn render(&self, index: usize) -> Image {
        let class = self.label(index);
        let mut rng = rng::stream(self.seed, &format!("synthetic.{index}"));
        let s = self.size as f32;
        let family = class % 4;
        let band = (class / 4) as f32;
        let freq = 2.0 + 1.5 * band + rng.random_range(-0.3f32..0.3);
        let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
        let phase2 = rng.random_range(0.0f32..std::f32::consts::TAU);
        let (cx, cy) = (
            s / 2.0 + rng.random_range(-3.0f32..3.0),
            s / 2.0 + rng.random_range(-3.0f32..3.0),
        );
        let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55f32..1.0));
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..0.45));
        let noise = Normal::new(0.0f32, self.noise.max(1e-12)).expect("valid noise");
        let tau = std::f32::consts::TAU;
        let mut img = Image::new(self.size, self.size, 3);
        for y in 0..self.size {
            for x in 0..self.size {
                let (fx, fy) = (x as f32 / s, y as f32 / s);
                let wave = match family {
                    0 => (tau * freq * fy + phase).sin(),
                    1 => (tau * freq * fx + phase).sin(),
                    2 => (tau * freq * fx + phase).sin() * (tau * freq * fy + phase2).sin(),
                    _ => {
                        let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() / s;
                        (tau * freq * r + phase).sin()
                    }
                };
                let mix = 0.5 + 0.5 * wave;
                for c in 0..3 {
                    let v = bg[c] * (1.0 - mix) + fg[c] * mix + noise.sample(&mut rng);
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }
}

impl SourceDataset for SyntheticShapes {
    fn name(&self) -> String {
        format!("synthetic-{}x{}", self.num_classes, self.per_class)
    }

    fn len(&self) -> usize {
        self.num_classes * self.per_class
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn label(&self, index: usize) -> usize {
        index % self.num_classes
    }

    fn image(&self, index: usize) -> Image {
        self.render(index)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (self.size, self.size, 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    #[serde(rename = "cifar10")]
    Cifar10,
    #[serde(rename = "cifar100")]
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, train: bool) -> (&'static str, Vec<&'static str>) {
        match (self, train) {
            (CifarVariant::Cifar10, true) => (
                "cifar-10-batches-bin",
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
            ),
            (CifarVariant::Cifar10, false) => ("cifar-10-batches-bin", vec!["test_batch.bin"]),
            (CifarVariant::Cifar100, true) => ("cifar-100-binary", vec!["train.bin"]),
            (CifarVariant::Cifar100, false) => ("cifar-100-binary", vec!["test.bin"]),
        }
    }

    /// Leading label bytes per record (CIFAR-100 stores coarse then fine).
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }
}

const CIFAR_PIXELS: usize = 32 * 32 * 3;

/// CIFAR-10/100 in the official binary layout: each record is the label
/// byte(s) followed by 1024 red, 1024 green and 1024 blue bytes.
#[derive(Clone, Debug)]
pub struct CifarDataset {
    variant: CifarVariant,
    train: bool,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl CifarDataset {
    pub fn default_root() -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn load(root: &Path, variant: CifarVariant, train: bool) -> Result<Self> {
        let (dir, files) = variant.files(train);
        let record = variant.label_bytes() + CIFAR_PIXELS;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for file in files {
            let path = root.join(dir).join(file);
            let bytes = fs::read(&path).map_err(|e| {
                ClafError::Dataset(format!(
                    "cannot read {} ({e}); place the binary CIFAR archive under ${DATA_DIR_ENV}",
                    path.display()
                ))
            })?;
            if bytes.len() % record != 0 {
                return Err(ClafError::Dataset(format!(
                    "{} is not a whole number of {record}-byte records",
                    path.display()
                )));
            }
            for rec in bytes.chunks_exact(record) {
                let label = rec[variant.label_bytes() - 1];
                if label as usize >= variant.num_classes() {
                    return Err(ClafError::Dataset(format!("label {label} out of range in {}", path.display())));
                }
                labels.push(label);
                pixels.extend_from_slice(&rec[variant.label_bytes()..]);
            }
        }
        Ok(Self {
            variant,
            train,
            pixels,
            labels,
        })
    }
}

impl SourceDataset for CifarDataset {
    fn name(&self) -> String {
        let split = if self.train { "train" } else { "test" };
        match self.variant {
            CifarVariant::Cifar10 => format!("cifar10-{split}"),
            CifarVariant::Cifar100 => format!("cifar100-{split}"),
        }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn num_classes(&self) -> usize {
        self.variant.num_classes()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    fn image(&self, index: usize) -> Image {
        let rec = &self.pixels[index * CIFAR_PIXELS..(index + 1) * CIFAR_PIXELS];
        let mut img = Image::new(32, 32, 3);
        for c in 0..3 {
            for p in 0..1024 {
                img.data[p * 3 + c] = rec[c * 1024 + p] as f32 / 255.0;
            }
        }
        img
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (32, 32, 3)
    }
}
