//! Procedural toy corpus: skin-toned blob images standing in for lesion
//! photographs, with an optional mesh overlay standing in for the target
//! dermoscopic structure.
//!
//! The mesh parameters (spacing, phase, contrast, jitter) are randomized per
//! image so a handful of examples underdetermines the concept; detectors
//! must learn "has a mesh", not one specific texture.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Range};
use crate::manifest::ArtifactFlag;
use crate::rng::seeded;

/// Visual family of a synthesized image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyStyle {
    /// Smooth lesion blob, no overlay (benign base class).
    Plain,
    /// Blob with a moderate-contrast irregular mesh (structure-positive).
    Grid,
    /// Blob with a strong mesh (malignant analogue for the grader).
    GridStrong,
    /// Plain blob crossed by dark streaks (acquisition-artifact analogue).
    Hairy,
}

impl std::str::FromStr for ToyStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ToyStyle::Plain),
            "grid" => Ok(ToyStyle::Grid),
            "grid_strong" => Ok(ToyStyle::GridStrong),
            "hairy" => Ok(ToyStyle::Hairy),
            other => Err(Error::Config(format!("unknown toy style: {other}"))),
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Synthesize one image in [0, 1]. Deterministic given the rng state.
pub fn synth_image(style: ToyStyle, resolution: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let r = resolution as f64;
    let mut data = Array3::zeros((3, resolution, resolution));

    // Skin-tone background with a gentle diagonal shade.
    let bg: [f64; 3] = [
        0.86 + rng.random_range(-0.04..0.04),
        0.70 + rng.random_range(-0.04..0.04),
        0.62 + rng.random_range(-0.04..0.04),
    ];
    let shade = rng.random_range(-0.05..0.05);

    // Lesion ellipse.
    let cx = r * rng.random_range(0.42..0.58);
    let cy = r * rng.random_range(0.42..0.58);
    let ra = r * rng.random_range(0.26..0.40);
    let rb = r * rng.random_range(0.26..0.40);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let lesion: [f64; 3] = [
        0.42 + rng.random_range(-0.06..0.06),
        0.28 + rng.random_range(-0.05..0.05),
        0.20 + rng.random_range(-0.05..0.05),
    ];
    let feather = 0.22;

    // Mesh parameters (used by Grid/GridStrong).
    let unit = (resolution as f64 / 32.0).max(1.0);
    let spacing_choices = [4.0, 5.0, 6.0, 8.0];
    let spacing = (spacing_choices[rng.random_range(0..spacing_choices.len())] * unit).round();
    let thickness = unit.round().max(1.0);
    let phase_x = rng.random_range(0.0..spacing);
    let phase_y = rng.random_range(0.0..spacing);
    let contrast = match style {
        ToyStyle::Grid => rng.random_range(0.45..0.70),
        ToyStyle::GridStrong => rng.random_range(0.75..0.95),
        _ => 0.0,
    };
    // Per-line positional jitter keeps the mesh irregular.
    let n_lines = (resolution as f64 / spacing).ceil() as usize + 2;
    let jitter: Vec<f64> = (0..2 * n_lines)
        .map(|_| rng.random_range(-1.0..1.0) * unit * 0.6)
        .collect();

    let mut noise = seeded(rng.random::<u64>(), "pixel-noise");

    for y in 0..resolution {
        for x in 0..resolution {
            let fx = x as f64;
            let fy = y as f64;
            // Ellipse-local coordinates.
            let dx = fx - cx;
            let dy = fy - cy;
            let u = (dx * cos_t + dy * sin_t) / ra;
            let v = (-dx * sin_t + dy * cos_t) / rb;
            let d = (u * u + v * v).sqrt();
            let alpha = smoothstep((1.0 - d) / feather);

            // Mesh line mask in lesion-interior pixels.
            let mut line = 0.0;
            if contrast > 0.0 && alpha > 0.05 {
                let col = ((fx - phase_x) / spacing).floor() as isize;
                let row = ((fy - phase_y) / spacing).floor() as isize;
                let col_off = jitter[(col.rem_euclid(n_lines as isize)) as usize];
                let row_off = jitter[n_lines + (row.rem_euclid(n_lines as isize)) as usize];
                let dist_v = ((fx - phase_x + col_off).rem_euclid(spacing)).min(
                    (spacing - (fx - phase_x + col_off).rem_euclid(spacing)).abs(),
                );
                let dist_h = ((fy - phase_y + row_off).rem_euclid(spacing)).min(
                    (spacing - (fy - phase_y + row_off).rem_euclid(spacing)).abs(),
                );
                if dist_v < thickness * 0.5 || dist_h < thickness * 0.5 {
                    line = contrast * alpha;
                }
            }

            let shade_term = shade * (fx + fy) / (2.0 * r);
            for c in 0..3 {
                let base = bg[c] + shade_term;
                let mottle = noise.random_range(-0.015..0.015);
                let val = base * (1.0 - alpha) + (lesion[c] + mottle) * alpha;
                data[[c, y, x]] = (val * (1.0 - line)).clamp(0.0, 1.0);
            }
        }
    }

    // Hair streaks cross the whole frame.
    if style == ToyStyle::Hairy {
        let n_hairs = rng.random_range(2..=4);
        for _ in 0..n_hairs {
            let x0 = rng.random_range(0.0..r);
            let y0 = rng.random_range(0.0..r);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = ang.sin_cos();
            let dark = rng.random_range(0.25..0.4);
            let steps = (2.2 * r) as isize;
            for t in -steps..steps {
                let px = x0 + c * t as f64 * 0.5;
                let py = y0 + s * t as f64 * 0.5;
                let (xi, yi) = (px.round() as isize, py.round() as isize);
                if xi >= 0 && yi >= 0 && (xi as usize) < resolution && (yi as usize) < resolution {
                    for ch in 0..3 {
                        data[[ch, yi as usize, xi as usize]] *= dark;
                    }
                }
            }
        }
    }

    ImageTensor::new(data, Range::Unit)
}

/// Mean absolute difference between adjacent pixels of the luminance plane.
/// Mesh overlays raise it; smooth blobs keep it low.
pub fn grid_energy(img: &ImageTensor) -> f64 {
    let lum = img.to_range(Range::Unit).luminance();
    let (h, w) = (lum.shape()[0], lum.shape()[1]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                sum += (lum[[y, x + 1]] - lum[[y, x]]).abs();
                count += 1;
            }
            if y + 1 < h {
                sum += (lum[[y + 1, x]] - lum[[y, x]]).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Write `count` toy images into `dir` as PNG, with an `artifacts.json`
/// sidecar flagging the hairy ones. Image i depends only on (seed, i), so
/// extending a pool keeps its prefix stable.
pub fn make_toy_pool(
    dir: &Path,
    style: ToyStyle,
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecar: BTreeMap<String, BTreeSet<ArtifactFlag>> = BTreeMap::new();
    for i in 0..count {
        let mut rng = seeded(seed, &format!("toy/{i}"));
        let img = synth_image(style, resolution, &mut rng);
        let name = format!("img_{i:05}.png");
        img.save_png(&dir.join(&name))?;
        if style == ToyStyle::Hairy {
            sidecar.insert(name, BTreeSet::from([ArtifactFlag::Hair]));
        }
    }
    if !sidecar.is_empty() {
        let json =
            serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(dir.join("artifacts.json"), json)
            .map_err(|e| Error::io(dir.join("artifacts.json"), e))?;
    }
    Ok(())
}

/// Heuristic artifact flagger for toy-style images: hairs are dark streaks
/// that reach the frame border, where a centered lesion never does.
pub fn detect_artifacts(img: &ImageTensor) -> BTreeSet<ArtifactFlag> {
    let lum = img.to_range(Range::Unit).luminance();
    let (h, w) = (lum.shape()[0], lum.shape()[1]);
    let band = (h.min(w) / 8).max(1);
    let mut dark = 0usize;
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            let in_band = y < band || y >= h - band || x < band || x >= w - band;
            if in_band {
                total += 1;
                if lum[[y, x]] < 0.35 {
                    dark += 1;
                }
            }
        }
    }
    let mut flags = BTreeSet::new();
    if dark as f64 / total as f64 > 0.01 {
        flags.insert(ArtifactFlag::Hair);
    }
    flags
}
