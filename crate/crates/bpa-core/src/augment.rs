//! Training-time image augmentation for the classifiers: random resized
//! crop, horizontal flip, and a RandAugment pass restricted to
//! label-preserving photometric and mild geometric operations.
//!
//! All outputs are square (`input_size`) in [0,1]. Inference uses
//! `preprocess`, which is deterministic.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageTensor, Range};

/// Magnitudes are interpreted on a 0..=30 scale.
const MAG_MAX: f64 = 30.0;
/// Fill value for pixels pulled in from outside the frame.
const FILL: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Crop area range as a fraction of the source area.
    pub crop_scale: (f64, f64),
    /// Crop aspect-ratio range (width / height).
    pub crop_ratio: (f64, f64),
    pub hflip_p: f64,
    /// RandAugment: number of operations applied per image.
    pub rand_n: usize,
    /// RandAugment: shared magnitude, 0..=30.
    pub rand_m: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            crop_scale: (0.5, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            hflip_p: 0.5,
            rand_n: 6,
            rand_m: 8,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..AugmentPolicy::default()
        }
    }
}

/// Deterministic inference-time preprocessing: aspect-preserving center
/// crop, then scale to the target square, in [0,1].
pub fn preprocess(img: &ImageTensor, input_size: usize) -> ImageTensor {
    img.to_range(Range::Unit)
        .center_crop_square()
        .resize_bilinear(input_size, input_size)
}

/// One randomized training view of `img`, exactly
/// `input_size x input_size x 3` in [0,1].
pub fn augment(
    img: &ImageTensor,
    input_size: usize,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    if !policy.enabled {
        return preprocess(img, input_size);
    }
    let unit = img.to_range(Range::Unit);
    let mut out = random_resized_crop(&unit, input_size, policy, rng);
    if policy.hflip_p > 0.0 && rng.random_bool(policy.hflip_p) {
        out = hflip(&out);
    }
    for _ in 0..policy.rand_n {
        let op = ALL_OPS[rng.random_range(0..ALL_OPS.len())];
        out = apply_op(&out, op, policy.rand_m, rng);
    }
    out
}

/// Crop a random sub-rectangle with area and aspect drawn from the policy
/// ranges (10 attempts, center-crop fallback), then resize to the target.
fn random_resized_crop(
    img: &ImageTensor,
    input_size: usize,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let (src_h, src_w) = (img.height(), img.width());
    let area = (src_h * src_w) as f64;
    let (lo_s, hi_s) = policy.crop_scale;
    let (lo_r, hi_r) = policy.crop_ratio;
    for _ in 0..10 {
        let target_area = area * rng.random_range(lo_s..=hi_s);
        let ratio = rng.random_range(lo_r.ln()..=hi_r.ln()).exp();
        let w = (target_area * ratio).sqrt().round() as usize;
        let h = (target_area / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= src_w && h <= src_h {
            let top = rng.random_range(0..=src_h - h);
            let left = rng.random_range(0..=src_w - w);
            let crop = img
                .data
                .slice(ndarray::s![.., top..top + h, left..left + w])
                .to_owned();
            let crop = ImageTensor::new(crop, img.range);
            return crop.resize_bilinear(input_size, input_size);
        }
    }
    img.center_crop_square().resize_bilinear(input_size, input_size)
}

fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut data = img.data.clone();
    data.invert_axis(ndarray::Axis(2));
    ImageTensor::new(data, img.range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandAugmentOp {
    AutoContrast,
    Equalize,
    Posterize,
    Solarize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
}

pub const ALL_OPS: [RandAugmentOp; 13] = [
    RandAugmentOp::AutoContrast,
    RandAugmentOp::Equalize,
    RandAugmentOp::Posterize,
    RandAugmentOp::Solarize,
    RandAugmentOp::Color,
    RandAugmentOp::Contrast,
    RandAugmentOp::Brightness,
    RandAugmentOp::Sharpness,
    RandAugmentOp::Rotate,
    RandAugmentOp::TranslateX,
    RandAugmentOp::TranslateY,
    RandAugmentOp::ShearX,
    RandAugmentOp::ShearY,
];

/// Apply one operation at magnitude `m`. Signed operations draw their
/// direction from `rng`.
pub fn apply_op(
    img: &ImageTensor,
    op: RandAugmentOp,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let frac = (m as f64 / MAG_MAX).min(1.0);
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    match op {
        RandAugmentOp::AutoContrast => autocontrast(img),
        RandAugmentOp::Equalize => equalize(img),
        RandAugmentOp::Posterize => {
            // 8 bits at m=0 down to 4 bits at full magnitude.
            let bits = 8 - (frac * 4.0).round() as u32;
            posterize(img, bits)
        }
        RandAugmentOp::Solarize => solarize(img, 1.0 - frac),
        RandAugmentOp::Color => {
            let factor = 1.0 + sign(rng) * 0.9 * frac;
            blend(img, &gray_image(img), factor)
        }
        RandAugmentOp::Contrast => {
            let lum = gray(img);
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            let base = ImageTensor::new(
                Array3::from_elem(img.data.raw_dim(), mean),
                img.range,
            );
            let factor = 1.0 + sign(rng) * 0.9 * frac;
            blend(img, &base, factor)
        }
        RandAugmentOp::Brightness => {
            let base = ImageTensor::new(Array3::zeros(img.data.raw_dim()), img.range);
            let factor = 1.0 + sign(rng) * 0.9 * frac;
            blend(img, &base, factor)
        }
        RandAugmentOp::Sharpness => {
            let factor = 1.0 + sign(rng) * 0.9 * frac;
            blend(img, &smooth(img), factor)
        }
        RandAugmentOp::Rotate => {
            let theta = sign(rng) * frac * 30.0_f64.to_radians();
            let (c, s) = (theta.cos(), theta.sin());
            // Inverse rotation about the image center.
            affine(img, [c, s, -s, c], [0.0, 0.0])
        }
        RandAugmentOp::TranslateX => {
            let t = sign(rng) * frac * 0.3 * img.width() as f64;
            affine(img, [1.0, 0.0, 0.0, 1.0], [t, 0.0])
        }
        RandAugmentOp::TranslateY => {
            let t = sign(rng) * frac * 0.3 * img.height() as f64;
            affine(img, [1.0, 0.0, 0.0, 1.0], [0.0, t])
        }
        RandAugmentOp::ShearX => {
            let sh = sign(rng) * frac * 0.3;
            affine(img, [1.0, sh, 0.0, 1.0], [0.0, 0.0])
        }
        RandAugmentOp::ShearY => {
            let sh = sign(rng) * frac * 0.3;
            affine(img, [1.0, 0.0, sh, 1.0], [0.0, 0.0])
        }
    }
}

fn gray(img: &ImageTensor) -> Array2<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = 0.299 * img.data[[0, y, x]]
                + 0.587 * img.data[[1, y, x]]
                + 0.114 * img.data[[2, y, x]];
        }
    }
    out
}

fn gray_image(img: &ImageTensor) -> ImageTensor {
    let g = gray(img);
    let mut data = Array3::zeros(img.data.raw_dim());
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..img.width() {
                data[[c, y, x]] = g[[y, x]];
            }
        }
    }
    ImageTensor::new(data, img.range)
}

/// out = base + (img - base) * factor, clamped to [0,1]. factor 1 is the
/// exact identity.
fn blend(img: &ImageTensor, base: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 1.0 {
        return img.clone();
    }
    let mut data = Array3::zeros(img.data.raw_dim());
    for ((o, &v), &b) in data.iter_mut().zip(img.data.iter()).zip(base.data.iter()) {
        *o = (b + (v - b) * factor).clamp(0.0, 1.0);
    }
    ImageTensor::new(data, img.range)
}

fn autocontrast(img: &ImageTensor) -> ImageTensor {
    let mut data = img.data.clone();
    for c in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in img.data.index_axis(ndarray::Axis(0), c).iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in data.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
                *v = ((*v - lo) * scale).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data, img.range)
}

/// Per-channel histogram equalization on 256 quantized levels.
fn equalize(img: &ImageTensor) -> ImageTensor {
    let mut data = img.data.clone();
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for v in img.data.index_axis(ndarray::Axis(0), c).iter() {
            hist[byte_of(*v)] += 1;
        }
        let nonzero: Vec<u64> = hist.iter().copied().filter(|&h| h > 0).collect();
        if nonzero.len() <= 1 {
            continue;
        }
        let step = (nonzero.iter().sum::<u64>() - nonzero[nonzero.len() - 1]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in data.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
            *v = lut[byte_of(*v)] as f64 / 255.0;
        }
    }
    ImageTensor::new(data, img.range)
}

fn byte_of(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn posterize(img: &ImageTensor, bits: u32) -> ImageTensor {
    if bits >= 8 {
        return img.clone();
    }
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    let mut data = img.data.clone();
    for v in data.iter_mut() {
        *v = (byte_of(*v) as u8 & mask) as f64 / 255.0;
    }
    ImageTensor::new(data, img.range)
}

/// Invert every pixel strictly above the threshold; threshold 1.0 is the
/// identity.
fn solarize(img: &ImageTensor, threshold: f64) -> ImageTensor {
    let mut data = img.data.clone();
    for v in data.iter_mut() {
        if *v > threshold {
            *v = 1.0 - *v;
        }
    }
    ImageTensor::new(data, img.range)
}

/// 3x3 smoothing kernel over the interior; border pixels pass through.
fn smooth(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut data = img.data.clone();
    if h < 3 || w < 3 {
        return ImageTensor::new(data, img.range);
    }
    let k = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    for c in 0..3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        acc += kv * img.data[[c, y + dy - 1, x + dx - 1]];
                    }
                }
                data[[c, y, x]] = acc / 13.0;
            }
        }
    }
    ImageTensor::new(data, img.range)
}

/// Sample the source through an inverse affine map about the image center:
/// src = M * (dst - center) + center - t. Out-of-frame reads use FILL.
fn affine(img: &ImageTensor, m: [f64; 4], t: [f64; 2]) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut data = Array3::zeros(img.data.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = m[0] * dx + m[1] * dy + cx - t[0];
            let sy = m[2] * dx + m[3] * dy + cy - t[1];
            for c in 0..3 {
                data[[c, y, x]] = sample_bilinear(img, c, sx, sy);
            }
        }
    }
    ImageTensor::new(data, img.range)
}

fn sample_bilinear(img: &ImageTensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
        for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let v = if ix >= 0 && ix < w && iy >= 0 && iy < h {
                img.data[[c, iy as usize, ix as usize]]
            } else {
                FILL
            };
            acc += wgt * v;
        }
    }
    acc
}
