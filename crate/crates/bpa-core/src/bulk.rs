//! Phase one: progressive-growing adversarial bulk image production.
//!
//! A generator is grown from 4x4 up to the target resolution, doubling per
//! stage. New stages fade in linearly: the blended image is
//! alpha * rgb(stage) + (1 - alpha) * upsample(rgb(stage - 1)), blended
//! before the output tanh so that alpha = 0 reproduces the previous stage's
//! output exactly under nearest-neighbor upsampling.
//!
//! The critic trains with the Wasserstein objective plus a gradient penalty
//! anchored at norm 1 on real/fake interpolates and a small drift term on
//! real scores. The penalty needs d/dw of |grad_x D(x)|, a second-order
//! quantity; it is computed exactly (the critic is piecewise linear): take
//! the input gradient g, then run a forward tangent pass with direction
//! g/|g| reusing the cached activation masks, then a linearized backward
//! pass that accumulates weight gradients against the tangent activations.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{stack_batch, unstack_batch, ImageTensor, Range};
use crate::nn::act::{LeakyRelu, Tanh};
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::norm::PixelNorm;
use crate::nn::optim::Adam;
use crate::nn::resample::{avgpool2x, avgpool2x_backward, downsample_to, upsample2x, upsample2x_backward};
use crate::nn::{join_name, Param, Parameterized};
use crate::rng::{fill_normal, seeded, RngState};

const LEAKY_SLOPE: f64 = 0.2;
const GEN_BATCH: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BulkConfig {
    pub latent_dim: usize,
    pub target_resolution: usize,
    /// Channel count at the final stage; earlier stages double it per halving.
    pub fmap_base: usize,
    pub fmap_max: usize,
    pub batch_size: usize,
    /// Images shown per stage; the first half of each stage fades the stage in.
    pub images_per_stage: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    pub drift_epsilon: f64,
}

impl Default for BulkConfig {
    fn default() -> Self {
        BulkConfig {
            latent_dim: 64,
            target_resolution: 32,
            fmap_base: 8,
            fmap_max: 32,
            batch_size: 8,
            images_per_stage: 2000,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            gp_weight: 10.0,
            drift_epsilon: 1e-3,
        }
    }
}

impl BulkConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.target_resolution;
        if r < 4 || r % 4 != 0 || !(r / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "target_resolution must be 4*2^k, got {r}"
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.fmap_base == 0 || self.fmap_max == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.images_per_stage < self.batch_size {
            return Err(Error::Config(
                "images_per_stage must be at least one batch".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.gp_weight >= 0.0) {
            return Err(Error::Config("lr must be > 0 and gp_weight >= 0".into()));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        (self.target_resolution / 4).trailing_zeros() as usize + 1
    }

    /// Resolutions trained, lowest first: 4, 8, ..., target.
    pub fn schedule(&self) -> Vec<usize> {
        (0..self.n_stages()).map(|s| 4usize << s).collect()
    }

    pub fn channels(&self, stage: usize) -> usize {
        let n = self.n_stages();
        assert!(stage < n, "stage out of range");
        self.fmap_max.min(self.fmap_base << (n - 1 - stage))
    }
}

/// Standard-normal latent batch, deterministic in (n, latent_dim, seed).
/// n may be zero; a zero latent dimension is a configuration error.
pub fn sample_latent(n: usize, latent_dim: usize, seed: u64) -> Result<Array2<f64>> {
    if latent_dim == 0 {
        return Err(Error::Config("latent_dim must be positive".into()));
    }
    let mut rng = seeded(seed, "bulk/sample");
    let mut z = Array2::zeros((n, latent_dim));
    fill_normal(&mut rng, z.as_slice_mut().unwrap());
    Ok(z)
}

#[derive(Debug, Clone, Copy)]
struct PassInfo {
    stage: usize,
    alpha: f64,
}

struct GenStage {
    conv1: Conv2d,
    act1: LeakyRelu,
    pn1: PixelNorm,
    conv2: Conv2d,
    act2: LeakyRelu,
    pn2: PixelNorm,
}

impl GenStage {
    fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        GenStage {
            conv1: Conv2d::new_equalized(in_c, out_c, 3, 1, 1, 2f64.sqrt(), rng),
            act1: LeakyRelu::new(LEAKY_SLOPE),
            pn1: PixelNorm::new(),
            conv2: Conv2d::new_equalized(out_c, out_c, 3, 1, 1, 2f64.sqrt(), rng),
            act2: LeakyRelu::new(LEAKY_SLOPE),
            pn2: PixelNorm::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let h = upsample2x(x);
        let h = self.conv1.forward(&h);
        let h = self.act1.forward(&h);
        let h = self.pn1.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.act2.forward(&h);
        self.pn2.forward(&h)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.pn2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.pn1.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.conv1.backward(&d);
        upsample2x_backward(&d)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join_name(prefix, "conv1"), f);
        self.conv2.visit_params(&join_name(prefix, "conv2"), f);
    }
}

pub struct Generator {
    latent_dim: usize,
    c0: usize,
    latent_norm: PixelNorm,
    base_fc: Linear,
    base_act0: LeakyRelu,
    base_pn0: PixelNorm,
    base_conv: Conv2d,
    base_act1: LeakyRelu,
    base_pn1: PixelNorm,
    stages: Vec<GenStage>,
    to_rgb: Vec<Conv2d>,
    tanh: Tanh,
    pass: Option<PassInfo>,
}

impl Generator {
    pub fn new(cfg: &BulkConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.n_stages();
        let c0 = cfg.channels(0);
        let base_fc = Linear::new_equalized(cfg.latent_dim, c0 * 16, 2f64.sqrt(), rng);
        let base_conv = Conv2d::new_equalized(c0, c0, 3, 1, 1, 2f64.sqrt(), rng);
        let mut stages = Vec::new();
        for s in 1..n {
            stages.push(GenStage::new(cfg.channels(s - 1), cfg.channels(s), rng));
        }
        let to_rgb = (0..n)
            .map(|s| Conv2d::new_equalized(cfg.channels(s), 3, 1, 1, 0, 1.0, rng))
            .collect();
        Generator {
            latent_dim: cfg.latent_dim,
            c0,
            latent_norm: PixelNorm::new(),
            base_fc,
            base_act0: LeakyRelu::new(LEAKY_SLOPE),
            base_pn0: PixelNorm::new(),
            base_conv,
            base_act1: LeakyRelu::new(LEAKY_SLOPE),
            base_pn1: PixelNorm::new(),
            stages,
            to_rgb,
            tanh: Tanh::new(),
            pass: None,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.to_rgb.len()
    }

    /// Image side length produced at `stage`.
    pub fn resolution(stage: usize) -> usize {
        4usize << stage
    }

    /// Produce images at `stage`. During fade-in (alpha < 1) the previous
    /// stage's rgb output is upsampled and blended in before the tanh.
    pub fn forward(&mut self, z: &Array2<f64>, stage: usize, alpha: f64) -> Array4<f64> {
        assert!(stage < self.n_stages(), "stage out of range");
        let n = z.shape()[0];
        let z4 = z
            .to_owned()
            .into_shape_with_order((n, self.latent_dim, 1, 1))
            .unwrap();
        let zn = self.latent_norm.forward(&z4);
        let z2 = zn.into_shape_with_order((n, self.latent_dim)).unwrap();
        let h = self.base_fc.forward(&z2);
        let h = h.into_shape_with_order((n, self.c0, 4, 4)).unwrap();
        let h = self.base_act0.forward(&h);
        let h = self.base_pn0.forward(&h);
        let h = self.base_conv.forward(&h);
        let h = self.base_act1.forward(&h);
        let mut h = self.base_pn1.forward(&h);

        let mut below_top = None;
        for t in 1..=stage {
            if t == stage {
                below_top = Some(h.clone());
            }
            h = self.stages[t - 1].forward(&h);
        }

        let rgb_hi = self.to_rgb[stage].forward(&h);
        let pre = if stage > 0 {
            let lo = self.to_rgb[stage - 1].forward(below_top.as_ref().unwrap());
            let up = upsample2x(&lo);
            rgb_hi.mapv(|v| v * alpha) + up.mapv(|v| v * (1.0 - alpha))
        } else {
            rgb_hi
        };
        self.pass = Some(PassInfo { stage, alpha });
        self.tanh.forward(&pre)
    }

    /// Accumulate parameter gradients for the preceding `forward`.
    pub fn backward(&mut self, dout: &Array4<f64>) {
        let info = self.pass.expect("forward before backward");
        let dpre = self.tanh.backward(dout);
        let (mut dh, d_below) = if info.stage > 0 {
            let d_hi = dpre.mapv(|v| v * info.alpha);
            let d_up = dpre.mapv(|v| v * (1.0 - info.alpha));
            let d_lo = upsample2x_backward(&d_up);
            let dh = self.to_rgb[info.stage].backward(&d_hi);
            let d_below = self.to_rgb[info.stage - 1].backward(&d_lo);
            (dh, Some(d_below))
        } else {
            (self.to_rgb[0].backward(&dpre), None)
        };
        for t in (1..=info.stage).rev() {
            dh = self.stages[t - 1].backward(&dh);
            if t == info.stage {
                if let Some(d) = &d_below {
                    dh = dh + d;
                }
            }
        }
        let dh = self.base_pn1.backward(&dh);
        let dh = self.base_act1.backward(&dh);
        let dh = self.base_conv.backward(&dh);
        let dh = self.base_pn0.backward(&dh);
        let dh = self.base_act0.backward(&dh);
        let n = dh.shape()[0];
        let dh2 = dh.into_shape_with_order((n, self.c0 * 16)).unwrap();
        // Latent normalization has no parameters; the chain stops here.
        let _ = self.base_fc.backward(&dh2);
    }
}

impl Parameterized for Generator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.base_fc.visit_params(&join_name(prefix, "base_fc"), f);
        self.base_conv.visit_params(&join_name(prefix, "base_conv"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join_name(prefix, &format!("stage{}", i + 1)), f);
        }
        for (i, c) in self.to_rgb.iter_mut().enumerate() {
            c.visit_params(&join_name(prefix, &format!("to_rgb{i}")), f);
        }
    }
}

struct CriticStage {
    conv1: Conv2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    act2: LeakyRelu,
}

impl CriticStage {
    fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        CriticStage {
            conv1: Conv2d::new_equalized(in_c, in_c, 3, 1, 1, 2f64.sqrt(), rng),
            act1: LeakyRelu::new(LEAKY_SLOPE),
            conv2: Conv2d::new_equalized(in_c, out_c, 3, 1, 1, 2f64.sqrt(), rng),
            act2: LeakyRelu::new(LEAKY_SLOPE),
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.conv1.forward(x);
        let h = self.act1.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.act2.forward(&h);
        avgpool2x(&h)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = avgpool2x_backward(dy);
        let d = self.act2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.act1.backward(&d);
        self.conv1.backward(&d)
    }

    fn backward_input(&self, dy: &Array4<f64>) -> Array4<f64> {
        let d = avgpool2x_backward(dy);
        let d = self.act2.backward_input(&d);
        let d = self.conv2.backward_input(&d);
        let d = self.act1.backward_input(&d);
        self.conv1.backward_input(&d)
    }

    fn forward_tangent(&mut self, t: &Array4<f64>) -> Array4<f64> {
        let h = self.conv1.forward_tangent(t);
        let h = self.act1.forward_tangent(&h);
        let h = self.conv2.forward_tangent(&h);
        let h = self.act2.forward_tangent(&h);
        avgpool2x(&h)
    }

    fn backward_linearized(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = avgpool2x_backward(dy);
        let d = self.act2.backward_linearized(&d);
        let d = self.conv2.backward_linearized(&d);
        let d = self.act1.backward_linearized(&d);
        self.conv1.backward_linearized(&d)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join_name(prefix, "conv1"), f);
        self.conv2.visit_params(&join_name(prefix, "conv2"), f);
    }
}

/// Wasserstein critic. No normalization layers anywhere: the gradient
/// penalty assumes per-sample independence of D.
pub struct Critic {
    c0: usize,
    from_rgb: Vec<Conv2d>,
    from_rgb_act: Vec<LeakyRelu>,
    stages: Vec<CriticStage>,
    final_conv1: Conv2d,
    final_act1: LeakyRelu,
    final_conv2: Conv2d,
    final_act2: LeakyRelu,
    final_fc: Linear,
    pass: Option<PassInfo>,
}

impl Critic {
    pub fn new(cfg: &BulkConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.n_stages();
        let c0 = cfg.channels(0);
        let from_rgb = (0..n)
            .map(|s| Conv2d::new_equalized(3, cfg.channels(s), 1, 1, 0, 2f64.sqrt(), rng))
            .collect();
        let from_rgb_act = (0..n).map(|_| LeakyRelu::new(LEAKY_SLOPE)).collect();
        let mut stages = Vec::new();
        for s in 1..n {
            stages.push(CriticStage::new(cfg.channels(s), cfg.channels(s - 1), rng));
        }
        Critic {
            c0,
            from_rgb,
            from_rgb_act,
            stages,
            final_conv1: Conv2d::new_equalized(c0, c0, 3, 1, 1, 2f64.sqrt(), rng),
            final_act1: LeakyRelu::new(LEAKY_SLOPE),
            final_conv2: Conv2d::new_equalized(c0, c0, 4, 1, 0, 2f64.sqrt(), rng),
            final_act2: LeakyRelu::new(LEAKY_SLOPE),
            final_fc: Linear::new_equalized(c0, 1, 1.0, rng),
            pass: None,
        }
    }

    /// Per-sample scores, shape [n, 1].
    pub fn forward(&mut self, x: &Array4<f64>, stage: usize, alpha: f64) -> Array2<f64> {
        assert!(stage < self.from_rgb.len(), "stage out of range");
        assert_eq!(x.shape()[2], 4usize << stage, "input size mismatch");
        let mut h = self.from_rgb[stage].forward(x);
        h = self.from_rgb_act[stage].forward(&h);
        if stage > 0 {
            h = self.stages[stage - 1].forward(&h);
            let pooled = avgpool2x(x);
            let mut skip = self.from_rgb[stage - 1].forward(&pooled);
            skip = self.from_rgb_act[stage - 1].forward(&skip);
            h = h.mapv(|v| v * alpha) + skip.mapv(|v| v * (1.0 - alpha));
            for t in (1..stage).rev() {
                h = self.stages[t - 1].forward(&h);
            }
        }
        let h = self.final_conv1.forward(&h);
        let h = self.final_act1.forward(&h);
        let h = self.final_conv2.forward(&h);
        let h = self.final_act2.forward(&h);
        let n = h.shape()[0];
        let h2 = h.into_shape_with_order((n, self.c0)).unwrap();
        self.pass = Some(PassInfo { stage, alpha });
        self.final_fc.forward(&h2)
    }

    /// Accumulate parameter gradients; returns d(loss)/d(input).
    pub fn backward(&mut self, d: &Array2<f64>) -> Array4<f64> {
        let info = self.pass.expect("forward before backward");
        let dh2 = self.final_fc.backward(d);
        let n = dh2.shape()[0];
        let dh = dh2.into_shape_with_order((n, self.c0, 1, 1)).unwrap();
        let dh = self.final_act2.backward(&dh);
        let dh = self.final_conv2.backward(&dh);
        let dh = self.final_act1.backward(&dh);
        let mut dh = self.final_conv1.backward(&dh);
        if info.stage > 0 {
            for t in 1..info.stage {
                dh = self.stages[t - 1].backward(&dh);
            }
            let d_main = dh.mapv(|v| v * info.alpha);
            let d_skip = dh.mapv(|v| v * (1.0 - info.alpha));
            let ds = self.from_rgb_act[info.stage - 1].backward(&d_skip);
            let ds = self.from_rgb[info.stage - 1].backward(&ds);
            let dx_skip = avgpool2x_backward(&ds);
            let dm = self.stages[info.stage - 1].backward(&d_main);
            let dm = self.from_rgb_act[info.stage].backward(&dm);
            let dx_main = self.from_rgb[info.stage].backward(&dm);
            dx_main + dx_skip
        } else {
            let dh = self.from_rgb_act[0].backward(&dh);
            self.from_rgb[0].backward(&dh)
        }
    }

    /// d(loss)/d(input) only; parameters untouched, caches preserved.
    pub fn backward_input(&self, d: &Array2<f64>) -> Array4<f64> {
        let info = self.pass.expect("forward before backward_input");
        let dh2 = self.final_fc.backward_input(d);
        let n = dh2.shape()[0];
        let dh = dh2.into_shape_with_order((n, self.c0, 1, 1)).unwrap();
        let dh = self.final_act2.backward_input(&dh);
        let dh = self.final_conv2.backward_input(&dh);
        let dh = self.final_act1.backward_input(&dh);
        let mut dh = self.final_conv1.backward_input(&dh);
        if info.stage > 0 {
            for t in 1..info.stage {
                dh = self.stages[t - 1].backward_input(&dh);
            }
            let d_main = dh.mapv(|v| v * info.alpha);
            let d_skip = dh.mapv(|v| v * (1.0 - info.alpha));
            let ds = self.from_rgb_act[info.stage - 1].backward_input(&d_skip);
            let ds = self.from_rgb[info.stage - 1].backward_input(&ds);
            let dx_skip = avgpool2x_backward(&ds);
            let dm = self.stages[info.stage - 1].backward_input(&d_main);
            let dm = self.from_rgb_act[info.stage].backward_input(&dm);
            let dx_main = self.from_rgb[info.stage].backward_input(&dm);
            dx_main + dx_skip
        } else {
            let dh = self.from_rgb_act[0].backward_input(&dh);
            self.from_rgb[0].backward_input(&dh)
        }
    }

    /// Directional derivative of the scores along input direction `t`,
    /// holding the piecewise-linear activation pattern of the last forward.
    pub fn forward_tangent(&mut self, t: &Array4<f64>) -> Array2<f64> {
        let info = self.pass.expect("forward before forward_tangent");
        let stage = info.stage;
        let mut h = self.from_rgb[stage].forward_tangent(t);
        h = self.from_rgb_act[stage].forward_tangent(&h);
        if stage > 0 {
            h = self.stages[stage - 1].forward_tangent(&h);
            let pooled = avgpool2x(t);
            let mut skip = self.from_rgb[stage - 1].forward_tangent(&pooled);
            skip = self.from_rgb_act[stage - 1].forward_tangent(&skip);
            h = h.mapv(|v| v * info.alpha) + skip.mapv(|v| v * (1.0 - info.alpha));
            for s in (1..stage).rev() {
                h = self.stages[s - 1].forward_tangent(&h);
            }
        }
        let h = self.final_conv1.forward_tangent(&h);
        let h = self.final_act1.forward_tangent(&h);
        let h = self.final_conv2.forward_tangent(&h);
        let h = self.final_act2.forward_tangent(&h);
        let n = h.shape()[0];
        let h2 = h.into_shape_with_order((n, self.c0)).unwrap();
        self.final_fc.forward_tangent(&h2)
    }

    /// Accumulate weight gradients of a loss on the tangent output. Biases
    /// get no gradient: the tangent map is bias-free.
    pub fn backward_linearized(&mut self, d: &Array2<f64>) -> Array4<f64> {
        let info = self.pass.expect("forward before backward_linearized");
        let dh2 = self.final_fc.backward_linearized(d);
        let n = dh2.shape()[0];
        let dh = dh2.into_shape_with_order((n, self.c0, 1, 1)).unwrap();
        let dh = self.final_act2.backward_linearized(&dh);
        let dh = self.final_conv2.backward_linearized(&dh);
        let dh = self.final_act1.backward_linearized(&dh);
        let mut dh = self.final_conv1.backward_linearized(&dh);
        if info.stage > 0 {
            for t in 1..info.stage {
                dh = self.stages[t - 1].backward_linearized(&dh);
            }
            let d_main = dh.mapv(|v| v * info.alpha);
            let d_skip = dh.mapv(|v| v * (1.0 - info.alpha));
            let ds = self.from_rgb_act[info.stage - 1].backward_linearized(&d_skip);
            let ds = self.from_rgb[info.stage - 1].backward_linearized(&ds);
            let dx_skip = avgpool2x_backward(&ds);
            let dm = self.stages[info.stage - 1].backward_linearized(&d_main);
            let dm = self.from_rgb_act[info.stage].backward_linearized(&dm);
            let dx_main = self.from_rgb[info.stage].backward_linearized(&dm);
            dx_main + dx_skip
        } else {
            let dh = self.from_rgb_act[0].backward_linearized(&dh);
            self.from_rgb[0].backward_linearized(&dh)
        }
    }
}

impl Parameterized for Critic {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.from_rgb.iter_mut().enumerate() {
            c.visit_params(&join_name(prefix, &format!("from_rgb{i}")), f);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join_name(prefix, &format!("stage{}", i + 1)), f);
        }
        self.final_conv1
            .visit_params(&join_name(prefix, "final_conv1"), f);
        self.final_conv2
            .visit_params(&join_name(prefix, "final_conv2"), f);
        self.final_fc.visit_params(&join_name(prefix, "final_fc"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BulkLogRow {
    pub step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub grad_penalty: f64,
}

pub struct BulkModel {
    pub cfg: BulkConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub stage: usize,
    pub alpha: f64,
    pub step: u64,
}

impl BulkModel {
    pub fn new(cfg: &BulkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed, "bulk/init");
        Ok(BulkModel {
            cfg: cfg.clone(),
            generator: Generator::new(cfg, &mut rng),
            critic: Critic::new(cfg, &mut rng),
            adam_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            adam_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            stage: 0,
            alpha: 1.0,
            step: 0,
        })
    }

    /// Generate at an explicit stage; stages outside the schedule are a
    /// configuration error.
    pub fn generator_forward(
        &mut self,
        z: &Array2<f64>,
        stage: usize,
        alpha: f64,
    ) -> Result<Array4<f64>> {
        let n = self.cfg.n_stages();
        if stage >= n {
            return Err(Error::Config(format!(
                "stage {stage} outside schedule of {n} stages"
            )));
        }
        if z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::Config(format!(
                "latent dim {} does not match configured {}",
                z.shape()[1],
                self.cfg.latent_dim
            )));
        }
        Ok(self.generator.forward(z, stage, alpha))
    }
}

impl Parameterized for BulkModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.generator.visit_params(&join_name(prefix, "g"), f);
        self.critic.visit_params(&join_name(prefix, "d"), f);
    }
}

fn latent_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
    let mut z = Array2::zeros((n, dim));
    fill_normal(rng, z.as_slice_mut().unwrap());
    z
}

fn sample_real_batch(
    pool: &Array4<f64>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Array4<f64> {
    let p = pool.shape()[0];
    let (c, h, w) = (pool.shape()[1], pool.shape()[2], pool.shape()[3]);
    let mut out = Array4::zeros((batch, c, h, w));
    for i in 0..batch {
        let j = rng.random_range(0..p);
        out.index_axis_mut(Axis(0), i)
            .assign(&pool.index_axis(Axis(0), j));
    }
    out
}

fn per_sample_l2(g: &Array4<f64>) -> Vec<f64> {
    (0..g.shape()[0])
        .map(|i| {
            g.index_axis(Axis(0), i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// One critic update. Returns (critic loss, penalty term).
fn critic_step(
    cfg: &BulkConfig,
    generator: &mut Generator,
    critic: &mut Critic,
    adam_d: &mut Adam,
    pool_s: &Array4<f64>,
    stage: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let b = cfg.batch_size;
    let nf = b as f64;
    critic.zero_grads();

    // Real scores: loss contribution -mean(D(real)) + drift * mean(D(real)^2).
    let real = sample_real_batch(pool_s, b, rng);
    let d_real = critic.forward(&real, stage, alpha);
    let drift = cfg.drift_epsilon;
    let seed_real = d_real.mapv(|v| -1.0 / nf + 2.0 * drift * v / nf);
    let _ = critic.backward(&seed_real);

    // Fake scores: +mean(D(fake)).
    let z = latent_batch(rng, b, cfg.latent_dim);
    let fake = generator.forward(&z, stage, alpha);
    let d_fake = critic.forward(&fake, stage, alpha);
    let seed_fake = Array2::from_elem((b, 1), 1.0 / nf);
    let _ = critic.backward(&seed_fake);

    // Gradient penalty on interpolates.
    let mut xhat = Array4::zeros(real.raw_dim());
    for i in 0..b {
        let u: f64 = rng.random();
        let r = real.index_axis(Axis(0), i);
        let fk = fake.index_axis(Axis(0), i);
        let mut dst = xhat.index_axis_mut(Axis(0), i);
        dst.assign(&(&r * u + &fk * (1.0 - u)));
    }
    let _ = critic.forward(&xhat, stage, alpha);
    let ones = Array2::from_elem((b, 1), 1.0);
    let g = critic.backward_input(&ones);
    let norms = per_sample_l2(&g);
    let mut v = g;
    for i in 0..b {
        let inv = 1.0 / norms[i].max(1e-12);
        v.index_axis_mut(Axis(0), i).mapv_inplace(|x| x * inv);
    }
    let tau = critic.forward_tangent(&v);
    for i in 0..b {
        let diff = (tau[[i, 0]] - norms[i]).abs();
        assert!(
            diff <= 1e-6 * norms[i].max(1.0),
            "tangent norm {} disagrees with gradient norm {}",
            tau[[i, 0]],
            norms[i]
        );
    }
    let lam = cfg.gp_weight;
    let mut seed_gp = Array2::zeros((b, 1));
    for i in 0..b {
        seed_gp[[i, 0]] = 2.0 * lam * (norms[i] - 1.0) / nf;
    }
    let _ = critic.backward_linearized(&seed_gp);

    adam_d.step(|f| critic.visit_params("d", f));

    let mean = |a: &Array2<f64>| a.iter().sum::<f64>() / nf;
    let gp_term = lam * norms.iter().map(|n| (n - 1.0) * (n - 1.0)).sum::<f64>() / nf;
    let loss_d = mean(&d_fake) - mean(&d_real)
        + gp_term
        + drift * d_real.iter().map(|v| v * v).sum::<f64>() / nf;
    (loss_d, gp_term)
}

/// One generator update. Returns the generator loss.
fn generator_step(
    cfg: &BulkConfig,
    generator: &mut Generator,
    critic: &mut Critic,
    adam_g: &mut Adam,
    stage: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let b = cfg.batch_size;
    let nf = b as f64;
    let z = latent_batch(rng, b, cfg.latent_dim);
    generator.zero_grads();
    let fake = generator.forward(&z, stage, alpha);
    let d_fake = critic.forward(&fake, stage, alpha);
    let dx = critic.backward_input(&Array2::from_elem((b, 1), -1.0 / nf));
    generator.backward(&dx);
    adam_g.step(|f| generator.visit_params("g", f));
    -d_fake.iter().sum::<f64>() / nf
}

/// Train from scratch across the whole stage schedule.
pub fn train_progressive(
    pool: &[ImageTensor],
    cfg: &BulkConfig,
    seed: u64,
    mut on_log: impl FnMut(&BulkLogRow),
) -> Result<BulkModel> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::MissingInput("bulk training pool is empty".into()));
    }
    for img in pool {
        if img.height() != cfg.target_resolution || img.width() != cfg.target_resolution {
            return Err(Error::Config(format!(
                "pool image is {}x{}, configured resolution is {}",
                img.width(),
                img.height(),
                cfg.target_resolution
            )));
        }
    }
    let full = stack_batch(pool, Range::Symmetric);
    let mut model = BulkModel::new(cfg, seed)?;
    let mut rng = seeded(seed, "bulk/train");
    let fade_images = (cfg.images_per_stage / 2).max(1);
    let steps_per_stage = cfg.images_per_stage.div_ceil(cfg.batch_size);

    for s in 0..cfg.n_stages() {
        let res = 4usize << s;
        let pool_s = downsample_to(&full, res);
        let mut seen = 0usize;
        for _ in 0..steps_per_stage {
            let alpha = if s == 0 {
                1.0
            } else {
                (seen as f64 / fade_images as f64).min(1.0)
            };
            let (loss_d, gp) = critic_step(
                cfg,
                &mut model.generator,
                &mut model.critic,
                &mut model.adam_d,
                &pool_s,
                s,
                alpha,
                &mut rng,
            );
            let loss_g = generator_step(
                cfg,
                &mut model.generator,
                &mut model.critic,
                &mut model.adam_g,
                s,
                alpha,
                &mut rng,
            );
            if !(loss_d.is_finite() && loss_g.is_finite()) {
                return Err(Error::Runtime(format!(
                    "non-finite loss at step {} (loss_d={loss_d}, loss_g={loss_g})",
                    model.step + 1
                )));
            }
            model.step += 1;
            model.stage = s;
            model.alpha = alpha;
            on_log(&BulkLogRow {
                step: model.step,
                stage: s,
                alpha,
                loss_g,
                loss_d,
                grad_penalty: gp,
            });
            seen += cfg.batch_size;
        }
    }
    Ok(model)
}

/// Sample `count` images at the final stage. Deterministic in
/// (model weights, count, seed); batching is fixed so grouping cannot
/// perturb results.
pub fn generate_images(model: &mut BulkModel, count: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let last = model.cfg.n_stages() - 1;
    let dim = model.cfg.latent_dim;
    let mut rng = seeded(seed, "bulk/generate");
    let mut out = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let b = left.min(GEN_BATCH);
        let z = latent_batch(&mut rng, b, dim);
        let imgs = model.generator.forward(&z, last, 1.0);
        out.extend(unstack_batch(&imgs, Range::Symmetric));
        left -= b;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BulkState {
    pub cfg: BulkConfig,
    pub stage: usize,
    pub alpha: f64,
    pub step: u64,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: RngState,
}

pub fn save_bulk(
    path: &std::path::Path,
    model: &mut BulkModel,
    config_hash: &str,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let state = BulkState {
        cfg: model.cfg.clone(),
        stage: model.stage,
        alpha: model.alpha,
        step: model.step,
        adam_g: model.adam_g.clone(),
        adam_d: model.adam_d.clone(),
        rng: RngState::capture(rng),
    };
    let state = serde_json::to_value(&state).map_err(|e| Error::Serde(e.to_string()))?;
    checkpoint::save(path, "bulk", config_hash, &state, model)
}

pub fn load_bulk(path: &std::path::Path) -> Result<(BulkModel, ChaCha8Rng)> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "bulk" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("kind is {}, expected bulk", ckpt.header.kind),
        });
    }
    let st: BulkState = ckpt.state()?;
    let mut model = BulkModel::new(&st.cfg, 0)?;
    ckpt.restore(&mut model)?;
    model.stage = st.stage;
    model.alpha = st.alpha;
    model.step = st.step;
    model.adam_g = st.adam_g;
    model.adam_d = st.adam_d;
    let rng = st.rng.restore()?;
    Ok((model, rng))
}
