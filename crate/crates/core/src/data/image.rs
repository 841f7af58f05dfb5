use ndarray::Array4;
use serde::{Deserialize, Serialize};

/// An HWC image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }
}

/// Per-channel standardisation applied when images are stacked into a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2471, 0.2435, 0.2616],
    };
    pub const CIFAR100: Normalization = Normalization {
        mean: [0.5071, 0.4867, 0.4408],
        std: [0.2675, 0.2565, 0.2761],
    };
    pub const CENTERED: Normalization = Normalization {
        mean: [0.5; 3],
        std: [0.25; 3],
    };
}

/// Stacks images into an NHWC batch, standardising each channel.
pub fn stack_images(images: &[Image], norm: &Normalization) -> Array4<f32> {
    let (h, w, c) = images.first().map(Image::shape).unwrap_or((0, 0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        assert_eq!(img.shape(), (h, w, c), "batch images must share a shape");
        data.extend(
            img.data
                .iter()
                .enumerate()
                .map(|(i, v)| (v - norm.mean[i % c % 3]) / norm.std[i % c % 3]),
        );
    }
    Array4::from_shape_vec((images.len(), h, w, c), data).expect("batch shape")
}
