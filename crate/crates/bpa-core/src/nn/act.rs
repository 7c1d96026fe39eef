//! Elementwise activations over [N,C,H,W] tensors.

use ndarray::Array4;

/// Leaky ReLU. The cached mask stores the local slope (1 or `slope`), which
/// is also exactly the factor every special backward pass needs.
pub struct LeakyRelu {
    pub slope: f64,
    mask: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, mask: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let slope = self.slope;
        let mask = x.mapv(|v| if v >= 0.0 { 1.0 } else { slope });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.as_ref().expect("leaky backward without forward");
        dy * mask
    }

    /// Same mask, read-only: safe between a forward and its tangent pass.
    pub fn backward_input(&self, dy: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.as_ref().expect("leaky backward_input without forward");
        dy * mask
    }

    pub fn forward_tangent(&self, t: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.as_ref().expect("leaky tangent without forward");
        t * mask
    }

    pub fn backward_linearized(&self, dy: &Array4<f64>) -> Array4<f64> {
        self.backward_input(dy)
    }
}

/// Plain ReLU (leaky with slope 0).
pub struct Relu(LeakyRelu);

impl Relu {
    pub fn new() -> Self {
        Relu(LeakyRelu::new(0.0))
    }
    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        self.0.forward(x)
    }
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        self.0.backward(dy)
    }
}

impl Default for Relu {
    fn default() -> Self {
        Relu::new()
    }
}

/// Tanh with output cache (derivative is 1 - y^2).
pub struct Tanh {
    cache_y: Option<Array4<f64>>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache_y: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = x.mapv(f64::tanh);
        self.cache_y = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let y = self.cache_y.take().expect("tanh backward without forward");
        dy * &y.mapv(|v| 1.0 - v * v)
    }
}

impl Default for Tanh {
    fn default() -> Self {
        Tanh::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn leaky_forward_and_backward() {
        let mut act = LeakyRelu::new(0.2);
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, -2.0, 0.0, -0.5]).unwrap();
        let y = act.forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[1.0, -0.4, 0.0, -0.1]);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = act.backward(&dy);
        assert_eq!(dx.as_slice().unwrap(), &[1.0, 0.2, 1.0, 0.2]);
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        let mut act = Tanh::new();
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let _ = act.forward(&x);
        let dy = Array4::from_elem((1, 1, 1, 3), 1.0);
        let dx = act.backward(&dy);
        let h = 1e-6;
        for i in 0..3 {
            let numeric = (((x[[0, 0, 0, i]] + h).tanh()) - ((x[[0, 0, 0, i]] - h).tanh())) / (2.0 * h);
            assert!((dx[[0, 0, 0, i]] - numeric).abs() < 1e-9);
        }
    }
}
