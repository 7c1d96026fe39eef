//! Phase two: unpaired two-domain translation that stamps a target
//! dermoscopic structure onto base images.
//!
//! Two resnet translators (A->B, B->A) and two patch discriminators train
//! with least-squares adversarial losses, cycle consistency (L1, weight
//! lambda_cycle) and identity regularization (L1, weight
//! lambda_identity_ratio * lambda_cycle). Discriminators score replayed
//! fakes from a fixed-size buffer.
//!
//! Layer caches hold one activation set, so the generator step runs in
//! three term groups (cycle A chain, cycle B chain, identities), finishing
//! each network's backward before its next forward.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{stack_batch, unstack_batch, ImageTensor, Range};
use crate::nn::act::{LeakyRelu, Relu, Tanh};
use crate::nn::conv::Conv2d;
use crate::nn::norm::InstanceNorm;
use crate::nn::optim::Adam;
use crate::nn::resample::upsample2x;
use crate::nn::resample::upsample2x_backward;
use crate::nn::{join_name, Param, Parameterized};
use crate::rng::{seeded, RngState};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_cycle: f64,
    /// Identity weight as a fraction of lambda_cycle.
    pub lambda_identity_ratio: f64,
    pub buffer_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            resolution: 32,
            base_channels: 8,
            res_blocks: 3,
            steps: 1000,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_cycle: 10.0,
            lambda_identity_ratio: 0.5,
            buffer_size: 50,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "transfer resolution must be a multiple of 8, at least 16, got {}",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.res_blocks == 0 {
            return Err(Error::Config(
                "base_channels and res_blocks must be positive".into(),
            ));
        }
        if self.steps == 0 || self.buffer_size == 0 {
            return Err(Error::Config("steps and buffer_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.lambda_cycle < 0.0 || self.lambda_identity_ratio < 0.0 {
            return Err(Error::Config(
                "lr must be > 0; loss weights must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn lambda_identity(&self) -> f64 {
        self.lambda_identity_ratio * self.lambda_cycle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AToB,
    BToA,
}

/// Mean absolute elementwise difference between an image and its
/// reconstruction.
pub fn cycle_loss(x: &ImageTensor, reconstructed: &ImageTensor) -> Result<f64> {
    if x.data.shape() != reconstructed.data.shape() {
        return Err(Error::Config(format!(
            "cycle_loss shape mismatch: {:?} vs {:?}",
            x.data.shape(),
            reconstructed.data.shape()
        )));
    }
    let n = x.data.len() as f64;
    Ok(x.data
        .iter()
        .zip(reconstructed.data.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

fn l1_mean(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Subgradient sign with sign(0) = 0, unlike f64::signum.
fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// d/da of mean |a - b|, scaled by `w`.
fn l1_grad(a: &Array4<f64>, b: &Array4<f64>, w: f64) -> Array4<f64> {
    let n = a.len() as f64;
    let mut g = Array4::zeros(a.raw_dim());
    for ((ga, &x), &y) in g.iter_mut().zip(a.iter()).zip(b.iter()) {
        *ga = w * l1_sign(x - y) / n;
    }
    g
}

struct ResBlock {
    conv1: Conv2d,
    in1: InstanceNorm,
    act: Relu,
    conv2: Conv2d,
    in2: InstanceNorm,
}

impl ResBlock {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new_plain(c, c, 3, 1, 1, rng),
            in1: InstanceNorm::new(),
            act: Relu::new(),
            conv2: Conv2d::new_plain(c, c, 3, 1, 1, rng),
            in2: InstanceNorm::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.conv1.forward(x);
        let h = self.in1.forward(&h);
        let h = self.act.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.in2.forward(&h);
        x + &h
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.in2.backward(dy);
        let d = self.conv2.backward(&d);
        let d = self.act.backward(&d);
        let d = self.in1.backward(&d);
        let d = self.conv1.backward(&d);
        dy + &d
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join_name(prefix, "conv1"), f);
        self.conv2.visit_params(&join_name(prefix, "conv2"), f);
    }
}

/// Shape-preserving image-to-image map: 7x7 head, two stride-2 encoders,
/// residual blocks, two upsample+conv decoders, 7x7 tail into tanh.
/// Zero padding throughout.
pub struct Translator {
    passthrough: bool,
    head: Conv2d,
    head_in: InstanceNorm,
    head_act: Relu,
    down1: Conv2d,
    down1_in: InstanceNorm,
    down1_act: Relu,
    down2: Conv2d,
    down2_in: InstanceNorm,
    down2_act: Relu,
    blocks: Vec<ResBlock>,
    up1: Conv2d,
    up1_in: InstanceNorm,
    up1_act: Relu,
    up2: Conv2d,
    up2_in: InstanceNorm,
    up2_act: Relu,
    tail: Conv2d,
    tanh: Tanh,
}

impl Translator {
    pub fn new(cfg: &TransferConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.base_channels;
        Translator {
            passthrough: false,
            head: Conv2d::new_plain(3, f, 7, 1, 3, rng),
            head_in: InstanceNorm::new(),
            head_act: Relu::new(),
            down1: Conv2d::new_plain(f, 2 * f, 3, 2, 1, rng),
            down1_in: InstanceNorm::new(),
            down1_act: Relu::new(),
            down2: Conv2d::new_plain(2 * f, 4 * f, 3, 2, 1, rng),
            down2_in: InstanceNorm::new(),
            down2_act: Relu::new(),
            blocks: (0..cfg.res_blocks).map(|_| ResBlock::new(4 * f, rng)).collect(),
            up1: Conv2d::new_plain(4 * f, 2 * f, 3, 1, 1, rng),
            up1_in: InstanceNorm::new(),
            up1_act: Relu::new(),
            up2: Conv2d::new_plain(2 * f, f, 3, 1, 1, rng),
            up2_in: InstanceNorm::new(),
            up2_act: Relu::new(),
            tail: Conv2d::new_plain(f, 3, 7, 1, 3, rng),
            tanh: Tanh::new(),
        }
    }

    /// Identity map: forward returns its input, backward passes gradients
    /// through, parameters receive none. Exists so an identity-initialized
    /// translator pair trivially satisfies the zero cycle/identity losses.
    pub fn new_passthrough(cfg: &TransferConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Translator::new(cfg, rng);
        t.passthrough = true;
        t
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        if self.passthrough {
            return x.clone();
        }
        let h = self.head.forward(x);
        let h = self.head_in.forward(&h);
        let h = self.head_act.forward(&h);
        let h = self.down1.forward(&h);
        let h = self.down1_in.forward(&h);
        let h = self.down1_act.forward(&h);
        let h = self.down2.forward(&h);
        let h = self.down2_in.forward(&h);
        let mut h = self.down2_act.forward(&h);
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        let h = upsample2x(&h);
        let h = self.up1.forward(&h);
        let h = self.up1_in.forward(&h);
        let h = self.up1_act.forward(&h);
        let h = upsample2x(&h);
        let h = self.up2.forward(&h);
        let h = self.up2_in.forward(&h);
        let h = self.up2_act.forward(&h);
        let h = self.tail.forward(&h);
        self.tanh.forward(&h)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        if self.passthrough {
            return dy.clone();
        }
        let d = self.tanh.backward(dy);
        let d = self.tail.backward(&d);
        let d = self.up2_act.backward(&d);
        let d = self.up2_in.backward(&d);
        let d = self.up2.backward(&d);
        let d = upsample2x_backward(&d);
        let d = self.up1_act.backward(&d);
        let d = self.up1_in.backward(&d);
        let d = self.up1.backward(&d);
        let mut d = upsample2x_backward(&d);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        let d = self.down2_act.backward(&d);
        let d = self.down2_in.backward(&d);
        let d = self.down2.backward(&d);
        let d = self.down1_act.backward(&d);
        let d = self.down1_in.backward(&d);
        let d = self.down1.backward(&d);
        let d = self.head_act.backward(&d);
        let d = self.head_in.backward(&d);
        self.head.backward(&d)
    }
}

impl Parameterized for Translator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head.visit_params(&join_name(prefix, "head"), f);
        self.down1.visit_params(&join_name(prefix, "down1"), f);
        self.down2.visit_params(&join_name(prefix, "down2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join_name(prefix, &format!("res{i}")), f);
        }
        self.up1.visit_params(&join_name(prefix, "up1"), f);
        self.up2.visit_params(&join_name(prefix, "up2"), f);
        self.tail.visit_params(&join_name(prefix, "tail"), f);
    }
}

/// Patch-level real/fake scorer: three stride-2 4x4 convs then a stride-1
/// 4x4 conv onto one channel. The first layer is norm-free.
pub struct PatchDiscriminator {
    c1: Conv2d,
    a1: LeakyRelu,
    c2: Conv2d,
    n2: InstanceNorm,
    a2: LeakyRelu,
    c3: Conv2d,
    n3: InstanceNorm,
    a3: LeakyRelu,
    c4: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(cfg: &TransferConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.base_channels;
        PatchDiscriminator {
            c1: Conv2d::new_plain(3, f, 4, 2, 1, rng),
            a1: LeakyRelu::new(LEAKY_SLOPE),
            c2: Conv2d::new_plain(f, 2 * f, 4, 2, 1, rng),
            n2: InstanceNorm::new(),
            a2: LeakyRelu::new(LEAKY_SLOPE),
            c3: Conv2d::new_plain(2 * f, 4 * f, 4, 2, 1, rng),
            n3: InstanceNorm::new(),
            a3: LeakyRelu::new(LEAKY_SLOPE),
            c4: Conv2d::new_plain(4 * f, 1, 4, 1, 1, rng),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.c1.forward(x);
        let h = self.a1.forward(&h);
        let h = self.c2.forward(&h);
        let h = self.n2.forward(&h);
        let h = self.a2.forward(&h);
        let h = self.c3.forward(&h);
        let h = self.n3.forward(&h);
        let h = self.a3.forward(&h);
        self.c4.forward(&h)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.c4.backward(dy);
        let d = self.a3.backward(&d);
        let d = self.n3.backward(&d);
        let d = self.c3.backward(&d);
        let d = self.a2.backward(&d);
        let d = self.n2.backward(&d);
        let d = self.c2.backward(&d);
        let d = self.a1.backward(&d);
        self.c1.backward(&d)
    }

    /// Input gradient only; parameter grads untouched, caches preserved.
    pub fn backward_input(&self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.c4.backward_input(dy);
        let d = self.a3.backward_input(&d);
        let d = self.n3.backward_input(&d);
        let d = self.c3.backward_input(&d);
        let d = self.a2.backward_input(&d);
        let d = self.n2.backward_input(&d);
        let d = self.c2.backward_input(&d);
        let d = self.a1.backward_input(&d);
        self.c1.backward_input(&d)
    }
}

impl Parameterized for PatchDiscriminator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit_params(&join_name(prefix, "c1"), f);
        self.c2.visit_params(&join_name(prefix, "c2"), f);
        self.c3.visit_params(&join_name(prefix, "c3"), f);
        self.c4.visit_params(&join_name(prefix, "c4"), f);
    }
}

/// Replay store for previously generated fakes: returns the fresh fake
/// until full, then returns either the fresh fake or a swapped-out stored
/// one with equal probability.
struct ReplayBuffer {
    cap: usize,
    items: Vec<Array4<f64>>,
}

impl ReplayBuffer {
    fn new(cap: usize) -> Self {
        ReplayBuffer {
            cap,
            items: Vec::new(),
        }
    }

    fn push_and_sample(&mut self, fake: &Array4<f64>, rng: &mut ChaCha8Rng) -> Array4<f64> {
        if self.items.len() < self.cap {
            self.items.push(fake.clone());
            return fake.clone();
        }
        if rng.random_bool(0.5) {
            fake.clone()
        } else {
            let j = rng.random_range(0..self.items.len());
            let out = self.items[j].clone();
            self.items[j] = fake.clone();
            out
        }
    }
}

/// Uniform-within-domain sampler that reshuffles per epoch, so every image
/// in a domain is visited once per domain epoch regardless of imbalance.
struct DomainSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl DomainSampler {
    fn new(n: usize) -> Self {
        DomainSampler {
            order: (0..n).collect(),
            cursor: n, // force an initial shuffle
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            // Fisher-Yates.
            for i in (1..self.order.len()).rev() {
                let j = rng.random_range(0..=i);
                self.order.swap(i, j);
            }
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransferLogRow {
    pub step: u64,
    pub loss_g_ab: f64,
    pub loss_g_ba: f64,
    pub loss_d_a: f64,
    pub loss_d_b: f64,
    /// Unweighted sum of both cycle terms.
    pub loss_cyc: f64,
    /// Unweighted sum of both identity terms.
    pub loss_id: f64,
}

/// Per-term generator losses, all unweighted.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenLossBreakdown {
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub identity_a: f64,
    pub identity_b: f64,
}

impl GenLossBreakdown {
    pub fn total(&self, lambda_cycle: f64, lambda_identity: f64) -> f64 {
        self.adv_ab
            + self.adv_ba
            + lambda_cycle * (self.cycle_a + self.cycle_b)
            + lambda_identity * (self.identity_a + self.identity_b)
    }
}

pub struct TransferModel {
    pub cfg: TransferConfig,
    pub g_ab: Translator,
    pub g_ba: Translator,
    pub d_a: PatchDiscriminator,
    pub d_b: PatchDiscriminator,
    pub adam_g: Adam,
    pub adam_d_a: Adam,
    pub adam_d_b: Adam,
    pub step: u64,
}

impl TransferModel {
    pub fn new(cfg: &TransferConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    /// Identity-initialized variant: both translators start as exact
    /// identity maps.
    pub fn new_passthrough(cfg: &TransferConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: &TransferConfig, seed: u64, passthrough: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed, "transfer/init");
        let mk = |rng: &mut ChaCha8Rng| {
            if passthrough {
                Translator::new_passthrough(cfg, rng)
            } else {
                Translator::new(cfg, rng)
            }
        };
        Ok(TransferModel {
            cfg: cfg.clone(),
            g_ab: mk(&mut rng),
            g_ba: mk(&mut rng),
            d_a: PatchDiscriminator::new(cfg, &mut rng),
            d_b: PatchDiscriminator::new(cfg, &mut rng),
            adam_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            adam_d_a: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            adam_d_b: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            step: 0,
        })
    }

    /// Evaluate every generator loss term on one (a, b) pair without
    /// touching gradients or optimizer state.
    pub fn generator_losses(&mut self, a: &Array4<f64>, b: &Array4<f64>) -> GenLossBreakdown {
        let fab = self.g_ab.forward(a);
        let s_fab = self.d_b.forward(&fab);
        let adv_ab = s_fab.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
        let rec_a = self.g_ba.forward(&fab);
        let cycle_a = l1_mean(&rec_a, a);

        let fba = self.g_ba.forward(b);
        let s_fba = self.d_a.forward(&fba);
        let adv_ba = s_fba.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
        let rec_b = self.g_ab.forward(&fba);
        let cycle_b = l1_mean(&rec_b, b);

        let id_b = self.g_ab.forward(b);
        let identity_b = l1_mean(&id_b, b);
        let id_a = self.g_ba.forward(a);
        let identity_a = l1_mean(&id_a, a);

        GenLossBreakdown {
            adv_ab,
            adv_ba,
            cycle_a,
            cycle_b,
            identity_a,
            identity_b,
        }
    }
}

impl Parameterized for TransferModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.g_ab.visit_params(&join_name(prefix, "g_ab"), f);
        self.g_ba.visit_params(&join_name(prefix, "g_ba"), f);
        self.d_a.visit_params(&join_name(prefix, "d_a"), f);
        self.d_b.visit_params(&join_name(prefix, "d_b"), f);
    }
}

/// Generator update on one (a, b) pair. Accumulates grads in term groups,
/// steps Adam once, returns the loss breakdown and both fakes for the
/// discriminator step.
fn generator_step(
    model: &mut TransferModel,
    a: &Array4<f64>,
    b: &Array4<f64>,
) -> (GenLossBreakdown, Array4<f64>, Array4<f64>) {
    let lam_cyc = model.cfg.lambda_cycle;
    let lam_id = model.cfg.lambda_identity();
    model.g_ab.zero_grads();
    model.g_ba.zero_grads();

    // Cycle A chain: a -> fab -> rec_a, plus the A->B adversarial term.
    let fab = model.g_ab.forward(a);
    let s_fab = model.d_b.forward(&fab);
    let adv_ab = s_fab.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
    let pn = s_fab.len() as f64;
    let d_s = s_fab.mapv(|v| 2.0 * (v - 1.0) / pn);
    let dx_adv = model.d_b.backward_input(&d_s);
    let rec_a = model.g_ba.forward(&fab);
    let cycle_a = l1_mean(&rec_a, a);
    let d_rec = l1_grad(&rec_a, a, lam_cyc);
    let dx_cyc = model.g_ba.backward(&d_rec);
    model.g_ab.backward(&(&dx_adv + &dx_cyc));

    // Cycle B chain: b -> fba -> rec_b, plus the B->A adversarial term.
    let fba = model.g_ba.forward(b);
    let s_fba = model.d_a.forward(&fba);
    let adv_ba = s_fba.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
    let pn = s_fba.len() as f64;
    let d_s = s_fba.mapv(|v| 2.0 * (v - 1.0) / pn);
    let dx_adv = model.d_a.backward_input(&d_s);
    let rec_b = model.g_ab.forward(&fba);
    let cycle_b = l1_mean(&rec_b, b);
    let d_rec = l1_grad(&rec_b, b, lam_cyc);
    let dx_cyc = model.g_ab.backward(&d_rec);
    model.g_ba.backward(&(&dx_adv + &dx_cyc));

    // Identity terms: G_AB should leave b alone, G_BA should leave a alone.
    let id_b = model.g_ab.forward(b);
    let identity_b = l1_mean(&id_b, b);
    model.g_ab.backward(&l1_grad(&id_b, b, lam_id));
    let id_a = model.g_ba.forward(a);
    let identity_a = l1_mean(&id_a, a);
    model.g_ba.backward(&l1_grad(&id_a, a, lam_id));

    let TransferModel {
        g_ab, g_ba, adam_g, ..
    } = model;
    adam_g.step(|f| {
        g_ab.visit_params("g_ab", f);
        g_ba.visit_params("g_ba", f);
    });

    (
        GenLossBreakdown {
            adv_ab,
            adv_ba,
            cycle_a,
            cycle_b,
            identity_a,
            identity_b,
        },
        fab,
        fba,
    )
}

/// Least-squares discriminator update: 0.5 * [(D(real)-1)^2 + D(fake)^2].
fn discriminator_step(
    d: &mut PatchDiscriminator,
    adam: &mut Adam,
    name: &str,
    real: &Array4<f64>,
    fake: &Array4<f64>,
) -> f64 {
    d.zero_grads();
    let s_real = d.forward(real);
    let pn = s_real.len() as f64;
    let loss_real = s_real.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
    let _ = d.backward(&s_real.mapv(|v| (v - 1.0) / pn));
    let s_fake = d.forward(fake);
    let loss_fake = s_fake.mapv(|v| v * v).mean().unwrap();
    let _ = d.backward(&s_fake.mapv(|v| v / pn));
    adam.step(|f| d.visit_params(name, f));
    0.5 * (loss_real + loss_fake)
}

fn single(img: &ImageTensor) -> Array4<f64> {
    stack_batch(std::slice::from_ref(img), Range::Symmetric)
}

fn check_pools(
    pool_a: &[ImageTensor],
    pool_b: &[ImageTensor],
    resolution: usize,
) -> Result<()> {
    if pool_a.is_empty() {
        return Err(Error::MissingInput("transfer domain a pool is empty".into()));
    }
    if pool_b.is_empty() {
        return Err(Error::MissingInput("transfer domain b pool is empty".into()));
    }
    for (label, pool) in [("a", pool_a), ("b", pool_b)] {
        for img in pool {
            if img.height() != resolution || img.width() != resolution {
                return Err(Error::Config(format!(
                    "domain {label} image is {}x{}, configured resolution is {}",
                    img.width(),
                    img.height(),
                    resolution
                )));
            }
        }
    }
    Ok(())
}

/// Train translators between two unpaired pools.
pub fn cycle_train(
    pool_a: &[ImageTensor],
    pool_b: &[ImageTensor],
    cfg: &TransferConfig,
    seed: u64,
    mut on_log: impl FnMut(&TransferLogRow),
) -> Result<TransferModel> {
    cfg.validate()?;
    check_pools(pool_a, pool_b, cfg.resolution)?;
    let mut model = TransferModel::new(cfg, seed)?;
    let mut rng = seeded(seed, "transfer/train");
    let mut sampler_a = DomainSampler::new(pool_a.len());
    let mut sampler_b = DomainSampler::new(pool_b.len());
    let mut buffer_a = ReplayBuffer::new(cfg.buffer_size);
    let mut buffer_b = ReplayBuffer::new(cfg.buffer_size);

    for _ in 0..cfg.steps {
        let a = single(&pool_a[sampler_a.next(&mut rng)]);
        let b = single(&pool_b[sampler_b.next(&mut rng)]);

        let (g_losses, fab, fba) = generator_step(&mut model, &a, &b);
        let buf_fba = buffer_a.push_and_sample(&fba, &mut rng);
        let buf_fab = buffer_b.push_and_sample(&fab, &mut rng);
        let loss_d_a =
            discriminator_step(&mut model.d_a, &mut model.adam_d_a, "d_a", &a, &buf_fba);
        let loss_d_b =
            discriminator_step(&mut model.d_b, &mut model.adam_d_b, "d_b", &b, &buf_fab);

        let row = TransferLogRow {
            step: model.step + 1,
            loss_g_ab: g_losses.adv_ab,
            loss_g_ba: g_losses.adv_ba,
            loss_d_a,
            loss_d_b,
            loss_cyc: g_losses.cycle_a + g_losses.cycle_b,
            loss_id: g_losses.identity_a + g_losses.identity_b,
        };
        if !(row.loss_cyc.is_finite() && row.loss_d_a.is_finite() && row.loss_d_b.is_finite()) {
            return Err(Error::Runtime(format!(
                "non-finite transfer loss at step {}",
                row.step
            )));
        }
        model.step += 1;
        on_log(&row);
    }
    Ok(model)
}

/// Map images through one translator direction. Output i corresponds to
/// input i: same shape, values in [-1,1].
pub fn translate_images(
    model: &mut TransferModel,
    direction: Direction,
    images: &[ImageTensor],
) -> Result<Vec<ImageTensor>> {
    let res = model.cfg.resolution;
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        if img.height() != res || img.width() != res {
            return Err(Error::Config(format!(
                "translate input is {}x{}, trained resolution is {res}",
                img.width(),
                img.height()
            )));
        }
        let x = single(img);
        let y = match direction {
            Direction::AToB => model.g_ab.forward(&x),
            Direction::BToA => model.g_ba.forward(&x),
        };
        out.extend(unstack_batch(&y, Range::Symmetric));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferState {
    pub cfg: TransferConfig,
    pub step: u64,
    pub adam_g: Adam,
    pub adam_d_a: Adam,
    pub adam_d_b: Adam,
    pub rng: RngState,
}

pub fn save_transfer(
    path: &std::path::Path,
    model: &mut TransferModel,
    config_hash: &str,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let state = TransferState {
        cfg: model.cfg.clone(),
        step: model.step,
        adam_g: model.adam_g.clone(),
        adam_d_a: model.adam_d_a.clone(),
        adam_d_b: model.adam_d_b.clone(),
        rng: RngState::capture(rng),
    };
    let state = serde_json::to_value(&state).map_err(|e| Error::Serde(e.to_string()))?;
    checkpoint::save(path, "transfer", config_hash, &state, model)
}

pub fn load_transfer(path: &std::path::Path) -> Result<(TransferModel, ChaCha8Rng)> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "transfer" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("kind is {}, expected transfer", ckpt.header.kind),
        });
    }
    let st: TransferState = ckpt.state()?;
    let mut model = TransferModel::new(&st.cfg, 0)?;
    ckpt.restore(&mut model)?;
    model.step = st.step;
    model.adam_g = st.adam_g;
    model.adam_d_a = st.adam_d_a;
    model.adam_d_b = st.adam_d_b;
    let rng = st.rng.restore()?;
    Ok((model, rng))
}
