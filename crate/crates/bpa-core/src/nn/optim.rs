//! Optimizers. They mutate `Param`s through a visitor closure so model
//! structure stays private to the model.

use super::Param;

/// Adam with bias correction. `t` is part of the training state and is
/// checkpointed alongside the per-parameter moments.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    /// One optimization step over every parameter the visitor yields.
    pub fn step<F>(&mut self, visit: F)
    where
        F: FnOnce(&mut dyn FnMut(&str, &mut Param)),
    {
        self.t += 1;
        let (lr, b1, b2, eps, t) = (self.lr, self.beta1, self.beta2, self.eps, self.t);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        visit(&mut |_, p| {
            ndarray::Zip::from(&mut p.m)
                .and(&p.grad)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut p.v)
                .and(&p.grad)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        });
    }
}

/// SGD with classical momentum and decoupled weight decay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            lr,
            momentum,
            weight_decay,
            t: 0,
        }
    }

    pub fn step<F>(&mut self, visit: F)
    where
        F: FnOnce(&mut dyn FnMut(&str, &mut Param)),
    {
        self.t += 1;
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        visit(&mut |_, p| {
            ndarray::Zip::from(&mut p.m)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|m, &g, &w| *m = mu * *m + g + wd * w);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .for_each(|w, &m| *w -= lr * m);
        });
    }
}
