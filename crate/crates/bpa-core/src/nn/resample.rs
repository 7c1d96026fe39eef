//! Parameter-free resampling: nearest-neighbor doubling, 2x average pooling,
//! global average pooling. All are linear maps, so their tangent pass is
//! their forward and their linearized backward is their ordinary backward.

use ndarray::{Array2, Array4};

/// Double H and W by pixel duplication.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[b, ch, i, j]];
                    y[[b, ch, 2 * i, 2 * j]] = v;
                    y[[b, ch, 2 * i + 1, 2 * j]] = v;
                    y[[b, ch, 2 * i, 2 * j + 1]] = v;
                    y[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of `upsample2x`: sum each 2x2 block.
pub fn upsample2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[b, ch, i, j]] = dy[[b, ch, 2 * i, 2 * j]]
                        + dy[[b, ch, 2 * i + 1, 2 * j]]
                        + dy[[b, ch, 2 * i, 2 * j + 1]]
                        + dy[[b, ch, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// Halve H and W by 2x2 mean pooling. Requires even spatial dims.
pub fn avgpool2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even dims, got {h}x{w}");
    let mut y = Array4::zeros((n, c, h / 2, w / 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[[b, ch, i, j]] = (x[[b, ch, 2 * i, 2 * j]]
                        + x[[b, ch, 2 * i + 1, 2 * j]]
                        + x[[b, ch, 2 * i, 2 * j + 1]]
                        + x[[b, ch, 2 * i + 1, 2 * j + 1]])
                        / 4.0;
                }
            }
        }
    }
    y
}

/// Adjoint of `avgpool2x`: spread each gradient over its 2x2 block.
pub fn avgpool2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((n, c, 2 * h, 2 * w));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = dy[[b, ch, i, j]] / 4.0;
                    dx[[b, ch, 2 * i, 2 * j]] = v;
                    dx[[b, ch, 2 * i + 1, 2 * j]] = v;
                    dx[[b, ch, 2 * i, 2 * j + 1]] = v;
                    dx[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    dx
}

/// Repeatedly average-pool until the side length reaches `target`.
pub fn downsample_to(x: &Array4<f64>, target: usize) -> Array4<f64> {
    let mut cur = x.clone();
    while cur.dim().2 > target {
        cur = avgpool2x(&cur);
    }
    assert_eq!(cur.dim().2, target, "target side must divide by powers of 2");
    cur
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avgpool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(b, ch)| {
        let plane = x.index_axis(ndarray::Axis(0), b);
        plane.index_axis(ndarray::Axis(0), ch).sum() / m
    })
}

pub fn global_avgpool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let m = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] / m)
}
