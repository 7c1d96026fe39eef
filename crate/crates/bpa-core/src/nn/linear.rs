//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{he_std, Param};

/// y = x · (scale·W)ᵀ + b, with the same scale convention as `Conv2d`.
pub struct Linear {
    pub w: Param, // [out, in]
    pub b: Param, // [out]
    pub in_dim: usize,
    pub out_dim: usize,
    pub scale: f64,
    cache_x: Option<Array2<f64>>,
    tangent_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new_equalized(in_dim: usize, out_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::randn(&[out_dim, in_dim], rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
            scale: gain / (in_dim as f64).sqrt(),
            cache_x: None,
            tangent_x: None,
        }
    }

    pub fn new_plain(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::randn_scaled(&[out_dim, in_dim], he_std(in_dim), rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
            scale: 1.0,
            cache_x: None,
            tangent_x: None,
        }
    }

    fn w_mat(&self) -> Array2<f64> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .expect("linear weight reshape")
            .mapv(|v| v * self.scale)
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = x.dot(&self.w_mat().t())
            + &self
                .b
                .value
                .view()
                .into_shape_with_order(self.out_dim)
                .expect("bias reshape");
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.take().expect("linear backward without forward");
        let dw = dy.t().dot(&x);
        let scale = self.scale;
        ndarray::Zip::from(&mut self.w.grad)
            .and(&dw.into_dyn())
            .for_each(|g, &d| *g += d * scale);
        let db: Array1<f64> = dy.sum_axis(Axis(0));
        ndarray::Zip::from(&mut self.b.grad)
            .and(&db.into_dyn())
            .for_each(|g, &d| *g += d);
        dy.dot(&self.w_mat())
    }

    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w_mat())
    }

    pub fn forward_tangent(&mut self, t: &Array2<f64>) -> Array2<f64> {
        self.tangent_x = Some(t.clone());
        t.dot(&self.w_mat().t())
    }

    pub fn backward_linearized(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let t = self
            .tangent_x
            .take()
            .expect("linear backward_linearized without forward_tangent");
        let dw = dy.t().dot(&t);
        let scale = self.scale;
        ndarray::Zip::from(&mut self.w.grad)
            .and(&dw.into_dyn())
            .for_each(|g, &d| *g += d * scale);
        dy.dot(&self.w_mat())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}/w"), &mut self.w);
        f(&format!("{prefix}/b"), &mut self.b);
    }
}
