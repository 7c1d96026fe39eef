//! 2D convolution via im2col + GEMM.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;

use super::{he_std, Param};

/// Unfold x [N,C,H,W] into columns [N, C*k*k, OH*OW] for kernel k / stride /
/// zero padding. Returns (cols, oh, ow).
pub(crate) fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array3::zeros((n, c * k * k, oh * ow));
    for b in 0..n {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[b, row, oy * ow + ox]] = x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Fold columns back onto an image, accumulating overlaps (adjoint of
/// `im2col`).
pub(crate) fn col2im(
    cols: &Array3<f64>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = in_shape;
    let ow = (w + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let mut x = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[b, ci, iy as usize, ix as usize]] += cols[[b, row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution layer. `scale` multiplies the stored weights at use time;
/// equalized-learning-rate layers store N(0,1) weights and fold the He
/// constant into `scale`, plain layers bake the constant into the weights
/// and use scale 1.
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub scale: f64,
    cache_cols: Option<Array3<f64>>,
    cache_in_shape: Option<(usize, usize, usize, usize)>,
    cache_out_hw: Option<(usize, usize)>,
    tangent_cols: Option<Array3<f64>>,
}

impl Conv2d {
    /// Equalized-learning-rate parameterization: w ~ N(0,1), runtime scale
    /// gain / sqrt(fan_in).
    pub fn new_equalized(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Param::randn(&[out_c, in_c, k, k], rng),
            b: Param::zeros(&[out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
            scale: gain / (fan_in as f64).sqrt(),
            cache_cols: None,
            cache_in_shape: None,
            cache_out_hw: None,
            tangent_cols: None,
        }
    }

    /// Plain He-initialized convolution, scale 1.
    pub fn new_plain(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Param::randn_scaled(&[out_c, in_c, k, k], he_std(fan_in), rng),
            b: Param::zeros(&[out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
            scale: 1.0,
            cache_cols: None,
            cache_in_shape: None,
            cache_out_hw: None,
            tangent_cols: None,
        }
    }

    fn w_mat(&self) -> Array2<f64> {
        let flat = self
            .w
            .value
            .view()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .expect("conv weight reshape");
        flat.mapv(|v| v * self.scale)
    }

    fn gemm_forward(&self, cols: &Array3<f64>, oh: usize, ow: usize, bias: bool) -> Array4<f64> {
        let n = cols.shape()[0];
        let w_mat = self.w_mat();
        let mut y = Array4::zeros((n, self.out_c, oh, ow));
        for bch in 0..n {
            let out = w_mat.dot(&cols.index_axis(Axis(0), bch));
            let mut dst = y.index_axis_mut(Axis(0), bch);
            let src = out
                .into_shape_with_order((self.out_c, oh, ow))
                .expect("conv output reshape");
            dst.assign(&src);
        }
        if bias {
            for bch in 0..n {
                for oc in 0..self.out_c {
                    let bv = self.b.value[[oc]];
                    y.index_axis_mut(Axis(0), bch)
                        .index_axis_mut(Axis(0), oc)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        y
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        debug_assert_eq!(x.dim().1, self.in_c, "conv input channels");
        let (cols, oh, ow) = im2col(x, self.k, self.stride, self.pad);
        let y = self.gemm_forward(&cols, oh, ow, true);
        self.cache_cols = Some(cols);
        self.cache_in_shape = Some(x.dim());
        self.cache_out_hw = Some((oh, ow));
        y
    }

    /// Standard backward: accumulates dW/db, returns dx.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cols = self.cache_cols.take().expect("conv backward without forward");
        let in_shape = self.cache_in_shape.expect("conv backward without forward");
        let (n, _, oh, ow) = dy.dim();
        let ckk = self.in_c * self.k * self.k;

        let mut dw_mat = Array2::<f64>::zeros((self.out_c, ckk));
        let w_mat = self.w_mat();
        let mut dcols = Array3::zeros((n, ckk, oh * ow));
        for b in 0..n {
            let dy_b = dy
                .index_axis(Axis(0), b)
                .into_shape_with_order((self.out_c, oh * ow))
                .expect("dy reshape");
            dw_mat = dw_mat + dy_b.dot(&cols.index_axis(Axis(0), b).t());
            dcols
                .index_axis_mut(Axis(0), b)
                .assign(&w_mat.t().dot(&dy_b));
        }
        // d(effective W) brought back to stored-weight space.
        let scale = self.scale;
        let dw = dw_mat
            .into_shape_with_order((self.out_c, self.in_c, self.k, self.k))
            .expect("dw reshape");
        ndarray::Zip::from(&mut self.w.grad)
            .and(&dw.into_dyn())
            .for_each(|g, &d| *g += d * scale);
        for oc in 0..self.out_c {
            let mut s = 0.0;
            for b in 0..n {
                s += dy.index_axis(Axis(0), b).index_axis(Axis(0), oc).sum();
            }
            self.b.grad[[oc]] += s;
        }
        col2im(&dcols, in_shape, self.k, self.stride, self.pad)
    }

    /// Input gradient only; parameters untouched, caches untouched.
    pub fn backward_input(&self, dy: &Array4<f64>) -> Array4<f64> {
        let in_shape = self
            .cache_in_shape
            .expect("conv backward_input without forward");
        let (n, _, oh, ow) = dy.dim();
        let ckk = self.in_c * self.k * self.k;
        let w_mat = self.w_mat();
        let mut dcols = Array3::zeros((n, ckk, oh * ow));
        for b in 0..n {
            let dy_b = dy
                .index_axis(Axis(0), b)
                .into_shape_with_order((self.out_c, oh * ow))
                .expect("dy reshape");
            dcols
                .index_axis_mut(Axis(0), b)
                .assign(&w_mat.t().dot(&dy_b));
        }
        col2im(&dcols, in_shape, self.k, self.stride, self.pad)
    }

    /// JVP: convolve the tangent with the current weights, no bias. Caches
    /// the tangent columns for `backward_linearized`.
    pub fn forward_tangent(&mut self, t: &Array4<f64>) -> Array4<f64> {
        let (cols, oh, ow) = im2col(t, self.k, self.stride, self.pad);
        let y = self.gemm_forward(&cols, oh, ow, false);
        self.tangent_cols = Some(cols);
        y
    }

    /// Accumulate dW for the scalar tangent output (no bias gradient: the
    /// tangent pass has none), return the tangent input gradient.
    pub fn backward_linearized(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cols = self
            .tangent_cols
            .take()
            .expect("conv backward_linearized without forward_tangent");
        let in_shape = self.cache_in_shape.expect("conv linearized without forward");
        let (n, _, oh, ow) = dy.dim();
        let ckk = self.in_c * self.k * self.k;
        let w_mat = self.w_mat();
        let mut dw_mat = Array2::<f64>::zeros((self.out_c, ckk));
        let mut dcols = Array3::zeros((n, ckk, oh * ow));
        for b in 0..n {
            let dy_b = dy
                .index_axis(Axis(0), b)
                .into_shape_with_order((self.out_c, oh * ow))
                .expect("dy reshape");
            dw_mat = dw_mat + dy_b.dot(&cols.index_axis(Axis(0), b).t());
            dcols
                .index_axis_mut(Axis(0), b)
                .assign(&w_mat.t().dot(&dy_b));
        }
        let scale = self.scale;
        let dw = dw_mat
            .into_shape_with_order((self.out_c, self.in_c, self.k, self.k))
            .expect("dw reshape");
        ndarray::Zip::from(&mut self.w.grad)
            .and(&dw.into_dyn())
            .for_each(|g, &d| *g += d * scale);
        col2im(&dcols, in_shape, self.k, self.stride, self.pad)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}/w"), &mut self.w);
        f(&format!("{prefix}/b"), &mut self.b);
    }
}
