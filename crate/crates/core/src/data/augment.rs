//! Weak and strong image views.
//!
//! Weak: random horizontal flip, then a random crop from a reflect-padded
//! copy. Strong: the weak view, then `num_ops` operations drawn uniformly from
//! the policy's op list (each applied with `apply_prob` at a magnitude drawn
//! uniformly from `[0, max_magnitude]`), then a square cutout. Magnitude `m`
//! maps to op strength as documented on [`AugOp`].

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

/// Operations available to the strong policy. With magnitude `m ∈ [0, 1]`
/// and a random sign `±`:
///
/// - `Brightness`, `Color`, `Contrast`, `Sharpness`: enhancement factor `1 ± 0.9m`
/// - `Rotate`: `±30m` degrees; `ShearX/Y`: `±0.3m`; `TranslateX/Y`: `±0.3m` of the side
/// - `Posterize`: keep `8 - round(4m)` bits; `Solarize`: invert values above `1 - m`
/// - `AutoContrast`, `Equalize`, `Identity`: magnitude ignored
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugOp {
    Identity,
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

impl AugOp {
    pub const ALL: [AugOp; 14] = [
        AugOp::Identity,
        AugOp::AutoContrast,
        AugOp::Brightness,
        AugOp::Color,
        AugOp::Contrast,
        AugOp::Equalize,
        AugOp::Posterize,
        AugOp::Rotate,
        AugOp::Sharpness,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::Solarize,
        AugOp::TranslateX,
        AugOp::TranslateY,
    ];
}

/// Transforms making up the weak view.
pub const WEAK_TRANSFORMS: [&str; 2] = ["horizontal-flip", "reflect-pad-crop"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub num_ops: usize,
    pub apply_prob: f64,
    pub max_magnitude: f64,
    pub ops: Vec<AugOp>,
    /// Maximum cutout side as a fraction of the image side.
    pub cutout: f64,
    pub fill: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_padding: 4,
            num_ops: 2,
            apply_prob: 0.5,
            max_magnitude: 1.0,
            ops: AugOp::ALL.to_vec(),
            cutout: 0.5,
            fill: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Draws the ops (with magnitudes) for one strong view; `None` entries
    /// were skipped by the per-op coin flip.
    pub fn sample_ops<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Option<(AugOp, f32)>> {
        (0..self.num_ops)
            .map(|_| {
                let op = *self.ops.choose(rng).unwrap_or(&AugOp::Identity);
                let magnitude = rng.random_range(0.0..=self.max_magnitude) as f32;
                let signed = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                rng.random_bool(self.apply_prob).then_some((op, signed))
            })
            .collect()
    }
}

pub fn weak_augment<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let flipped = if rng.random_bool(policy.flip_prob) {
        hflip(img)
    } else {
        img.clone()
    };
    let p = policy.crop_padding;
    if p == 0 {
        return flipped;
    }
    let oy = rng.random_range(0..=2 * p);
    let ox = rng.random_range(0..=2 * p);
    reflect_crop(&flipped, p, oy, ox)
}

pub fn strong_augment<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let mut out = weak_augment(img, policy, rng);
    for (op, magnitude) in policy.sample_ops(rng).into_iter().flatten() {
        out = apply_op(&out, op, magnitude, policy.fill);
    }
    cutout(&mut out, policy.cutout, policy.fill, rng);
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Crop of the reflect-padded image at offset `(oy, ox)` in padded
/// coordinates; offset `(pad, pad)` is the identity.
pub fn reflect_crop(img: &Image, pad: usize, oy: usize, ox: usize) -> Image {
    let mut out = Image::new(img.height, img.width, img.channels);
    for y in 0..img.height {
        let sy = reflect(y as isize + oy as isize - pad as isize, img.height);
        for x in 0..img.width {
            let sx = reflect(x as isize + ox as isize - pad as isize, img.width);
            for c in 0..img.channels {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

fn cutout<R: Rng + ?Sized>(img: &mut Image, max_fraction: f64, fill: f32, rng: &mut R) {
    if max_fraction <= 0.0 {
        return;
    }
    let side = (rng.random_range(0.0..=max_fraction) * img.width as f64).round() as usize;
    let cy = rng.random_range(0..img.height);
    let cx = rng.random_range(0..img.width);
    let y0 = cy.saturating_sub(side / 2);
    let x0 = cx.saturating_sub(side / 2);
    for y in y0..(y0 + side).min(img.height) {
        for x in x0..(x0 + side).min(img.width) {
            for c in 0..img.channels {
                img.set(y, x, c, fill);
            }
        }
    }
}

fn luminance(img: &Image, y: usize, x: usize) -> f32 {
    if img.channels < 3 {
        return img.get(y, x, 0);
    }
    0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
}

fn blend(base: &Image, img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for (o, (b, v)) in out.data.iter_mut().zip(base.data.iter().zip(&img.data)) {
        *o = b + factor * (v - b);
    }
    out.clamp01();
    out
}

/// Inverse-mapped affine warp with bilinear sampling about the image centre.
/// `inv` maps output coordinates (relative to the centre) to input ones.
fn affine(img: &Image, inv: [f32; 6], fill: f32) -> Image {
    let (h, w) = (img.height as f32, img.width as f32);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let mut out = Image::new(img.height, img.width, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            let (rx, ry) = (x as f32 - cx, y as f32 - cy);
            let sx = inv[0] * rx + inv[1] * ry + inv[2] + cx;
            let sy = inv[3] * rx + inv[4] * ry + inv[5] + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..img.channels {
                let sample = |yy: f32, xx: f32| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy > h - 1.0 || xx > w - 1.0 {
                        fill
                    } else {
                        img.get(yy as usize, xx as usize, c)
                    }
                };
                let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + sample(y0, x0 + 1.0) * fx * (1.0 - fy)
                    + sample(y0 + 1.0, x0) * (1.0 - fx) * fy
                    + sample(y0 + 1.0, x0 + 1.0) * fx * fy;
                out.set(y, x, c, v);
            }
        }
    }
    out
}

fn smooth(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 1..img.height.saturating_sub(1) {
        for x in 1..img.width.saturating_sub(1) {
            for c in 0..img.channels {
                let mut acc = 4.0 * img.get(y, x, c);
                for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    acc += img.get((y as isize + dy) as usize, (x as isize + dx) as usize, c);
                }
                out.set(y, x, c, acc / 12.0);
            }
        }
    }
    out
}

fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..img.channels {
        let mut hist = [0usize; 256];
        let bins: Vec<usize> = (0..n)
            .map(|p| (img.data[p * img.channels + c] * 255.0).round().clamp(0.0, 255.0) as usize)
            .collect();
        bins.iter().for_each(|&b| hist[b] += 1);
        let mut cdf = [0usize; 256];
        let mut run = 0;
        for (i, h) in hist.iter().enumerate() {
            run += h;
            cdf[i] = run;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        for (p, &b) in bins.iter().enumerate() {
            out.data[p * img.channels + c] = (cdf[b] - cdf_min) as f32 / (n - cdf_min) as f32;
        }
    }
    out
}

/// Applies one op at signed magnitude `m ∈ [-1, 1]` (sign used by symmetric ops).
pub fn apply_op(img: &Image, op: AugOp, m: f32, fill: f32) -> Image {
    let factor = 1.0 + 0.9 * m;
    match op {
        AugOp::Identity => img.clone(),
        AugOp::AutoContrast => {
            let mut out = img.clone();
            for c in 0..img.channels {
                let vals = img.data.iter().skip(c).step_by(img.channels);
                let (lo, hi) = vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
                if hi - lo > 1e-6 {
                    out.data
                        .iter_mut()
                        .skip(c)
                        .step_by(img.channels)
                        .for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
            out
        }
        AugOp::Brightness => blend(&Image::new(img.height, img.width, img.channels), img, factor),
        AugOp::Color => {
            let mut gray = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    let l = luminance(img, y, x);
                    (0..img.channels).for_each(|c| gray.set(y, x, c, l));
                }
            }
            blend(&gray, img, factor)
        }
        AugOp::Contrast => {
            let n = (img.height * img.width) as f32;
            let mean = (0..img.height)
                .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                .map(|(y, x)| luminance(img, y, x))
                .sum::<f32>()
                / n;
            blend(&Image::filled(img.height, img.width, img.channels, mean), img, factor)
        }
        AugOp::Sharpness => blend(&smooth(img), img, factor),
        AugOp::Equalize => equalize(img),
        AugOp::Posterize => {
            let bits = 8 - (4.0 * m.abs()).round() as u32;
            let levels = (1u32 << bits) as f32;
            img.map(|v| ((v * 255.0).round() as u32 >> (8 - bits)) as f32 / (levels - 1.0).max(1.0))
        }
        AugOp::Solarize => {
            let threshold = 1.0 - m.abs();
            img.map(|v| if v >= threshold { 1.0 - v } else { v })
        }
        AugOp::Rotate => {
            let theta = (30.0 * m).to_radians();
            let (s, c) = theta.sin_cos();
            affine(img, [c, s, 0.0, -s, c, 0.0], fill)
        }
        AugOp::ShearX => affine(img, [1.0, 0.3 * m, 0.0, 0.0, 1.0, 0.0], fill),
        AugOp::ShearY => affine(img, [1.0, 0.0, 0.0, 0.3 * m, 1.0, 0.0], fill),
        AugOp::TranslateX => affine(img, [1.0, 0.0, 0.3 * m * img.width as f32, 0.0, 1.0, 0.0], fill),
        AugOp::TranslateY => affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, 0.3 * m * img.height as f32], fill),
    }
}
