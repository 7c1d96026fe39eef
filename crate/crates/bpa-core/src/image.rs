//! Image tensors with an explicit intensity-range convention.
//!
//! Generators operate on [-1, 1] data, classifiers on [0, 1]; mixing the two
//! silently is the classic source of washed-out samples, so the range rides
//! along in the type and every conversion is explicit.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Intensity range convention of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    /// Values in [0, 1] (classifier convention).
    Unit,
    /// Values in [-1, 1] (generator convention).
    Symmetric,
}

/// An RGB image as channels-first float data plus its range convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    /// Shape [3, height, width].
    pub data: Array3<f64>,
    pub range: Range,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: Range) -> Self {
        assert_eq!(data.shape()[0], 3, "image tensors are RGB");
        ImageTensor { data, range }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Convert to the requested range (no-op when already there).
    pub fn to_range(&self, range: Range) -> ImageTensor {
        if self.range == range {
            return self.clone();
        }
        let data = match (self.range, range) {
            (Range::Unit, Range::Symmetric) => self.data.mapv(|v| v * 2.0 - 1.0),
            (Range::Symmetric, Range::Unit) => self.data.mapv(|v| (v + 1.0) / 2.0),
            _ => unreachable!("equal ranges handled above"),
        };
        ImageTensor { data, range }
    }

    /// Decode an image file. Any format the decoder understands is accepted;
    /// output is always RGB in [0, 1].
    pub fn load(path: &Path) -> Result<ImageTensor> {
        let img = ::image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .into_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> ImageTensor {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        ImageTensor {
            data,
            range: Range::Unit,
        }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let unit = self.to_range(Range::Unit);
        let (h, w) = (unit.height(), unit.width());
        let mut img = ::image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = std::array::from_fn(|c| {
                    (unit.data[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, ::image::Rgb(px));
            }
        }
        img
    }

    /// Write as lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
    }

    /// Crop to the centered largest square.
    pub fn center_crop_square(&self) -> ImageTensor {
        let (h, w) = (self.height(), self.width());
        let side = h.min(w);
        let top = (h - side) / 2;
        let left = (w - side) / 2;
        let data = self
            .data
            .slice(ndarray::s![.., top..top + side, left..left + side])
            .to_owned();
        ImageTensor {
            data,
            range: self.range,
        }
    }

    /// Bilinear resample to (out_h, out_w), half-pixel-center convention.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> ImageTensor {
        let (h, w) = (self.height(), self.width());
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let mut out = Array3::zeros((3, out_h, out_w));
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.data[[c, y0, x0]] * (1.0 - wx) + self.data[[c, y0, x1]] * wx;
                    let bot = self.data[[c, y1, x0]] * (1.0 - wx) + self.data[[c, y1, x1]] * wx;
                    out[[c, oy, ox]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        ImageTensor {
            data: out,
            range: self.range,
        }
    }

    /// Center-crop to square then scale to `target` per side: the ingest
    /// normalization applied to every external image.
    pub fn ingest_resize(&self, target: usize) -> ImageTensor {
        self.center_crop_square().resize_bilinear(target, target)
    }

    /// Mean over channels, shape [H, W].
    pub fn luminance(&self) -> ndarray::Array2<f64> {
        self.data.mean_axis(Axis(0)).expect("3 channels")
    }
}

/// Stack images (all same shape and range) into a [N, 3, H, W] batch.
pub fn stack_batch(images: &[ImageTensor], range: Range) -> Array4<f64> {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        let img = img.to_range(range);
        assert_eq!(
            (img.height(), img.width()),
            (h, w),
            "batch images must share shape"
        );
        out.index_axis_mut(Axis(0), i).assign(&img.data);
    }
    out
}

/// Split a [N, 3, H, W] batch back into image tensors.
pub fn unstack_batch(batch: &Array4<f64>, range: Range) -> Vec<ImageTensor> {
    (0..batch.shape()[0])
        .map(|i| ImageTensor {
            data: batch.index_axis(Axis(0), i).to_owned(),
            range,
        })
        .collect()
}

/// Lowercase-hex SHA-256 of raw bytes; the identity of every manifest record.
pub fn content_hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn content_hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash_bytes(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (c as f64 * 0.1 + y as f64 / h as f64 + x as f64 / w as f64) / 3.0
        });
        ImageTensor::new(data, Range::Unit)
    }

    #[test]
    fn range_conversion_round_trips() {
        let img = gradient_image(8, 8);
        let back = img.to_range(Range::Symmetric).to_range(Range::Unit);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn range_conversion_maps_endpoints() {
        let mut img = gradient_image(2, 2);
        img.data.fill(0.0);
        let sym = img.to_range(Range::Symmetric);
        assert!(sym.data.iter().all(|&v| v == -1.0));
        img.data.fill(1.0);
        assert!(img
            .to_range(Range::Symmetric)
            .data
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn center_crop_takes_middle_square() {
        let img = gradient_image(10, 6);
        let sq = img.center_crop_square();
        assert_eq!((sq.height(), sq.width()), (6, 6));
        assert_eq!(sq.data[[0, 0, 0]], img.data[[0, 2, 0]]);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let mut img = gradient_image(8, 8);
        img.data.fill(0.37);
        let up = img.resize_bilinear(13, 5);
        assert_eq!((up.height(), up.width()), (13, 5));
        for &v in up.data.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn ingest_resize_squares_any_aspect() {
        for (h, w) in [(31, 64), (64, 31), (32, 32), (7, 9)] {
            let img = gradient_image(h, w);
            let out = img.ingest_resize(32);
            assert_eq!((out.height(), out.width()), (32, 32));
        }
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Values on the u8 grid survive encode/decode exactly.
        let data = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| {
            ((c * 83 + y * 17 + x * 29) % 256) as f64 / 255.0
        });
        let img = ImageTensor::new(data, Range::Unit);
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let a = content_hash_bytes(b"abc");
        assert_eq!(a, content_hash_bytes(b"abc"));
        assert_ne!(a, content_hash_bytes(b"abd"));
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn stack_unstack_round_trip() {
        let imgs = vec![gradient_image(4, 4), gradient_image(4, 4)];
        let batch = stack_batch(&imgs, Range::Unit);
        assert_eq!(batch.shape(), &[2, 3, 4, 4]);
        let back = unstack_batch(&batch, Range::Unit);
        assert_eq!(back[0].data, imgs[0].data);
        assert_eq!(back[1].data, imgs[1].data);
    }
}
