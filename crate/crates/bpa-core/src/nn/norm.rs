//! Normalization layers: pixelwise feature norm (generator) and instance
//! norm without affine parameters (translator).

use ndarray::Array4;

const EPS: f64 = 1e-8;

/// Pixelwise feature normalization: y = x / sqrt(mean_c x^2 + eps),
/// computed independently at every (n, h, w) site.
pub struct PixelNorm {
    cache_x: Option<Array4<f64>>,
    cache_r: Option<Array4<f64>>, // [N,1,H,W] reciprocal norms
}

impl PixelNorm {
    pub fn new() -> Self {
        PixelNorm {
            cache_x: None,
            cache_r: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut r = Array4::zeros((n, 1, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut ss = 0.0;
                    for ch in 0..c {
                        let v = x[[b, ch, i, j]];
                        ss += v * v;
                    }
                    let rv = 1.0 / (ss / c as f64 + EPS).sqrt();
                    r[[b, 0, i, j]] = rv;
                    for ch in 0..c {
                        y[[b, ch, i, j]] = x[[b, ch, i, j]] * rv;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        self.cache_r = Some(r);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_x.take().expect("pixelnorm backward without forward");
        let r = self.cache_r.take().expect("pixelnorm backward without forward");
        let (n, c, h, w) = x.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let rv = r[[b, 0, i, j]];
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += dy[[b, ch, i, j]] * x[[b, ch, i, j]];
                    }
                    let k = rv * rv * rv * dot / c as f64;
                    for ch in 0..c {
                        dx[[b, ch, i, j]] = rv * dy[[b, ch, i, j]] - k * x[[b, ch, i, j]];
                    }
                }
            }
        }
        dx
    }
}

impl Default for PixelNorm {
    fn default() -> Self {
        PixelNorm::new()
    }
}

/// Instance normalization without affine parameters: each (n, c) plane is
/// centered and scaled to unit variance over its spatial extent.
pub struct InstanceNorm {
    cache_xhat: Option<Array4<f64>>,
    cache_inv: Option<Vec<f64>>, // per (n*c) reciprocal std
}

impl InstanceNorm {
    pub fn new() -> Self {
        InstanceNorm {
            cache_xhat: None,
            cache_inv: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut invs = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(ndarray::Axis(0), b);
                let plane = plane.index_axis(ndarray::Axis(0), ch);
                let mean = plane.sum() / m;
                let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                let inv = 1.0 / (var + 1e-5).sqrt();
                invs.push(inv);
                for i in 0..h {
                    for j in 0..w {
                        xhat[[b, ch, i, j]] = (x[[b, ch, i, j]] - mean) * inv;
                    }
                }
            }
        }
        self.cache_xhat = Some(xhat.clone());
        self.cache_inv = Some(invs);
        xhat
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let xhat = self.cache_xhat.take().expect("instnorm backward without forward");
        let invs = self.cache_inv.take().expect("instnorm backward without forward");
        Self::backward_with(&xhat, &invs, dy)
    }

    /// Like `backward` but leaves the cache in place for a later `backward`.
    pub fn backward_input(&self, dy: &Array4<f64>) -> Array4<f64> {
        let xhat = self
            .cache_xhat
            .as_ref()
            .expect("instnorm backward_input without forward");
        let invs = self
            .cache_inv
            .as_ref()
            .expect("instnorm backward_input without forward");
        Self::backward_with(xhat, invs, dy)
    }

    fn backward_with(xhat: &Array4<f64>, invs: &[f64], dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = xhat.dim();
        let m = (h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let inv = invs[b * c + ch];
                let mut mean_dy = 0.0;
                let mut mean_dy_xhat = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        mean_dy += dy[[b, ch, i, j]];
                        mean_dy_xhat += dy[[b, ch, i, j]] * xhat[[b, ch, i, j]];
                    }
                }
                mean_dy /= m;
                mean_dy_xhat /= m;
                for i in 0..h {
                    for j in 0..w {
                        dx[[b, ch, i, j]] = inv
                            * (dy[[b, ch, i, j]] - mean_dy - xhat[[b, ch, i, j]] * mean_dy_xhat);
                    }
                }
            }
        }
        dx
    }
}

impl Default for InstanceNorm {
    fn default() -> Self {
        InstanceNorm::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed, "norm");
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = crate::rng::normal(&mut rng);
        }
        x
    }

    #[test]
    fn pixelnorm_output_has_unit_channel_norm() {
        let mut pn = PixelNorm::new();
        let x = randn4((2, 8, 3, 3), 4);
        let y = pn.forward(&x);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let ss: f64 = (0..8).map(|c| y[[b, c, i, j]] * y[[b, c, i, j]]).sum();
                    assert!((ss / 8.0 - 1.0).abs() < 1e-6, "norm {}", ss / 8.0);
                }
            }
        }
    }

    fn fd_check_loss(
        forward: &mut dyn FnMut(&Array4<f64>) -> f64,
        x: &mut Array4<f64>,
        dx: &Array4<f64>,
        picks: &[(usize, usize, usize, usize)],
    ) {
        let h = 1e-6;
        for &(a, b, c, d) in picks {
            let analytic = dx[[a, b, c, d]];
            x[[a, b, c, d]] += h;
            let lp = forward(x);
            x[[a, b, c, d]] -= 2.0 * h;
            let lm = forward(x);
            x[[a, b, c, d]] += h;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (numeric - analytic).abs() / analytic.abs().max(1e-8) < 1e-4,
                "numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn pixelnorm_backward_matches_finite_differences() {
        let mut x = randn4((1, 4, 2, 2), 5);
        let coeff = randn4((1, 4, 2, 2), 6);
        let mut pn = PixelNorm::new();
        let _ = pn.forward(&x);
        let dx = pn.backward(&coeff);
        let mut forward = |x: &Array4<f64>| (&PixelNorm::new().forward(x) * &coeff).sum();
        fd_check_loss(
            &mut forward,
            &mut x,
            &dx,
            &[(0, 0, 0, 0), (0, 3, 1, 1), (0, 2, 0, 1)],
        );
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut inorm = InstanceNorm::new();
        let x = randn4((2, 3, 6, 6), 7) * 3.0 + 1.5;
        let y = inorm.forward(&x);
        for b in 0..2 {
            for c in 0..3 {
                let plane = y.index_axis(ndarray::Axis(0), b);
                let plane = plane.index_axis(ndarray::Axis(0), c);
                let m = plane.sum() / 36.0;
                let v = plane.mapv(|t| (t - m) * (t - m)).sum() / 36.0;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let mut x = randn4((1, 2, 3, 3), 8);
        let coeff = randn4((1, 2, 3, 3), 9);
        let mut inorm = InstanceNorm::new();
        let _ = inorm.forward(&x);
        let dx = inorm.backward(&coeff);
        let mut forward = |x: &Array4<f64>| (&InstanceNorm::new().forward(x) * &coeff).sum();
        fd_check_loss(
            &mut forward,
            &mut x,
            &dx,
            &[(0, 0, 0, 0), (0, 1, 2, 2), (0, 0, 1, 2)],
        );
    }
}
