//! Binary image classifiers for structure detection and malignancy
//! grading: a pluggable feature extractor feeding a linear head trained
//! with class-weighted binary cross-entropy and momentum SGD.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, preprocess, AugmentPolicy};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{stack_batch, ImageTensor, Range};
use crate::metrics;
use crate::nn::act::Relu;
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::optim::MomentumSgd;
use crate::nn::resample::{avgpool2x, avgpool2x_backward, global_avgpool, global_avgpool_backward};
use crate::nn::{join_name, Param, Parameterized};
use crate::rng::seeded;

/// Inference batch width, fixed so prediction order cannot change scores.
const PRED_BATCH: usize = 32;

/// How the configured weight_decay value is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdMode {
    /// Decoupled weight-decay coefficient applied at every step.
    Coefficient,
    /// Learning-rate decay factor applied once per epoch.
    EpochLrDecay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: String,
    pub input_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub wd_mode: WdMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training set held out for validation AUC.
    pub val_fraction: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping. Extreme
    /// class weights can otherwise blow up a batch that is all rare class.
    pub grad_clip: f64,
    pub augment: AugmentPolicy,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: "toy-cnn".into(),
            input_size: 24,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            wd_mode: WdMode::Coefficient,
            epochs: 8,
            batch_size: 16,
            val_fraction: 0.2,
            grad_clip: 0.0,
            augment: AugmentPolicy::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 4, at least 8, got {}",
                self.input_size
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 0.5], got {}",
                self.val_fraction
            )));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0, got {}",
                self.grad_clip
            )));
        }
        let (lo, hi) = self.augment.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Maps a preprocessed batch to a flat feature vector per image.
pub trait FeatureExtractor: Parameterized {
    fn forward(&mut self, x: &Array4<f64>) -> Array2<f64>;
    /// Consumes the caches left by the matching forward call.
    fn backward(&mut self, dfeat: &Array2<f64>);
    fn feature_dim(&self) -> usize;
}

/// Small from-scratch CNN: three conv+relu blocks with 2x pooling between,
/// global average pool at the end.
pub struct ToyCnn {
    conv1: Conv2d,
    a1: Relu,
    conv2: Conv2d,
    a2: Relu,
    conv3: Conv2d,
    a3: Relu,
    gap_hw: Option<(usize, usize)>,
}

const TOY_FEAT: usize = 32;

impl ToyCnn {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        ToyCnn {
            conv1: Conv2d::new_plain(3, 8, 3, 1, 1, rng),
            a1: Relu::new(),
            conv2: Conv2d::new_plain(8, 16, 3, 1, 1, rng),
            a2: Relu::new(),
            conv3: Conv2d::new_plain(16, TOY_FEAT, 3, 1, 1, rng),
            a3: Relu::new(),
            gap_hw: None,
        }
    }
}

impl FeatureExtractor for ToyCnn {
    fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let h = self.conv1.forward(x);
        let h = self.a1.forward(&h);
        let h = avgpool2x(&h);
        let h = self.conv2.forward(&h);
        let h = self.a2.forward(&h);
        let h = avgpool2x(&h);
        let h = self.conv3.forward(&h);
        let h = self.a3.forward(&h);
        self.gap_hw = Some((h.shape()[2], h.shape()[3]));
        global_avgpool(&h)
    }

    fn backward(&mut self, dfeat: &Array2<f64>) {
        let (gh, gw) = self.gap_hw.expect("backward before forward");
        let d = global_avgpool_backward(dfeat, gh, gw);
        let d = self.a3.backward(&d);
        let d = self.conv3.backward(&d);
        let d = avgpool2x_backward(&d);
        let d = self.a2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = avgpool2x_backward(&d);
        let d = self.a1.backward(&d);
        let _ = self.conv1.backward(&d);
    }

    fn feature_dim(&self) -> usize {
        TOY_FEAT
    }
}

impl Parameterized for ToyCnn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join_name(prefix, "conv1"), f);
        self.conv2.visit_params(&join_name(prefix, "conv2"), f);
        self.conv3.visit_params(&join_name(prefix, "conv3"), f);
    }
}

/// Instantiate a feature extractor by id. The compound-scaled backbone id
/// is accepted in configuration but needs pretrained weights that are not
/// bundled, so constructing it reports a missing input.
pub fn build_backbone(id: &str, rng: &mut ChaCha8Rng) -> Result<Box<dyn FeatureExtractor>> {
    match id {
        "toy-cnn" => Ok(Box::new(ToyCnn::new(rng))),
        "efficientnet-b1" => Err(Error::MissingInput(
            "backbone efficientnet-b1 requires pretrained weights that are not bundled; \
             use backbone \"toy-cnn\""
                .into(),
        )),
        other => Err(Error::Config(format!("unknown backbone: {other}"))),
    }
}

pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    backbone: Box<dyn FeatureExtractor>,
    head: Linear,
    pub class_weights: (f64, f64),
    pub epochs_trained: usize,
}

impl Parameterized for ClassifierModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join_name(prefix, "backbone"), f);
        self.head.visit_params(&join_name(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split lacks one of the classes.
    pub val_auc: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
fn clip_grad_norm(model: &mut impl Parameterized, max_norm: f64) {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        model.visit_params("", &mut |_, p| {
            p.grad.mapv_inplace(|g| g * scale);
        });
    }
}

/// Per-image standardization over all channels and pixels. Skin images are
/// nearly constant, so raw [0,1] batches leave the filters staring at the
/// mean; this puts the local contrast at unit scale.
fn standardize(x: &mut Array4<f64>) {
    let per = x.len() / x.shape()[0].max(1);
    for mut img in x.axis_iter_mut(Axis(0)) {
        let mean = img.iter().sum::<f64>() / per as f64;
        let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        let inv = 1.0 / var.sqrt().max(1e-6);
        img.mapv_inplace(|v| (v - mean) * inv);
    }
}

/// Stratified index split: per class, shuffled, first slice to validation.
/// Classes with fewer than two members stay entirely in training.
pub(crate) fn split_indices(
    labels: &[bool],
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let n_val = if n < 2 {
            0
        } else {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Train a binary classifier. `labels[i]` is the positive-class flag for
/// `images[i]`. Emits one log row per epoch with the mean weighted
/// training loss and held-out AUC.
pub fn train_classifier(
    images: &[ImageTensor],
    labels: &[bool],
    cfg: &ClassifierConfig,
    seed: u64,
    mut on_log: impl FnMut(&EpochLogRow),
) -> Result<ClassifierModel> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Config(format!(
            "got {} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::MissingInput("classifier training set is empty".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "classifier training set has a single class; need both".into(),
        ));
    }

    let mut split_rng = seeded(seed, "classifier/split");
    let (train_idx, val_idx) = split_indices(labels, cfg.val_fraction, &mut split_rng);
    let train_pos = train_idx.iter().filter(|&&i| labels[i]).count();
    let train_neg = train_idx.len() - train_pos;
    let class_weights = metrics::class_weights(train_neg, train_pos)?;

    let mut init_rng = seeded(seed, "classifier/init");
    let backbone = build_backbone(&cfg.backbone, &mut init_rng)?;
    let head = Linear::new_plain(backbone.feature_dim(), 1, &mut init_rng);
    let mut model = ClassifierModel {
        cfg: cfg.clone(),
        backbone,
        head,
        class_weights,
        epochs_trained: 0,
    };

    let (wd_coeff, lr_decay) = match cfg.wd_mode {
        WdMode::Coefficient => (cfg.weight_decay, 0.0),
        WdMode::EpochLrDecay => (0.0, cfg.weight_decay),
    };
    let mut sgd = MomentumSgd::new(cfg.lr, cfg.momentum, wd_coeff);

    let val_images: Vec<ImageTensor> = val_idx.iter().map(|&i| images[i].clone()).collect();
    let val_labels: Vec<bool> = val_idx.iter().map(|&i| labels[i]).collect();

    for epoch in 0..cfg.epochs {
        sgd.lr = cfg.lr * (1.0 - lr_decay).powi(epoch as i32);
        let mut rng = seeded(seed, &format!("classifier/epoch/{epoch}"));
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<ImageTensor> = chunk
                .iter()
                .map(|&i| augment(&images[i], cfg.input_size, &cfg.augment, &mut rng))
                .collect();
            let mut x = stack_batch(&views, Range::Unit);
            standardize(&mut x);
            let feats = model.backbone.forward(&x);
            let logits = model.head.forward(&feats);

            let b = chunk.len();
            let scores: Vec<f64> = (0..b).map(|i| sigmoid(logits[[i, 0]])).collect();
            let batch_labels: Vec<bool> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = metrics::weighted_bce(&scores, &batch_labels, class_weights)?;
            loss_sum += loss * b as f64;

            let mut dlogits = Array2::zeros((b, 1));
            for i in 0..b {
                let y = if batch_labels[i] { 1.0 } else { 0.0 };
                let w = if batch_labels[i] {
                    class_weights.1
                } else {
                    class_weights.0
                };
                dlogits[[i, 0]] = w * (scores[i] - y) / b as f64;
            }
            model.zero_grads();
            let dfeat = model.head.backward(&dlogits);
            model.backbone.backward(&dfeat);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut model, cfg.grad_clip);
            }
            let ClassifierModel { backbone, head, .. } = &mut model;
            sgd.step(|f| {
                backbone.visit_params("backbone", f);
                head.visit_params("head", f);
            });
        }

        let train_loss = loss_sum / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Runtime(format!(
                "non-finite training loss in epoch {epoch}"
            )));
        }
        let val_scores = predict(&mut model, &val_images)?;
        let val_auc = metrics::auc(&val_scores, &val_labels).unwrap_or(f64::NAN);
        model.epochs_trained = epoch + 1;
        on_log(&EpochLogRow {
            epoch,
            train_loss,
            val_auc,
        });
    }
    Ok(model)
}

/// Sigmoid scores in [0,1], one per image, in input order. Inference is
/// deterministic: center-crop preprocessing only, no augmentation.
pub fn predict(model: &mut ClassifierModel, images: &[ImageTensor]) -> Result<Vec<f64>> {
    let size = model.cfg.input_size;
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(PRED_BATCH) {
        let views: Vec<ImageTensor> = chunk.iter().map(|img| preprocess(img, size)).collect();
        let mut x = stack_batch(&views, Range::Unit);
        standardize(&mut x);
        let feats = model.backbone.forward(&x);
        let logits = model.head.forward(&feats);
        for i in 0..chunk.len() {
            scores.push(sigmoid(logits[[i, 0]]));
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierState {
    pub cfg: ClassifierConfig,
    pub class_weights: (f64, f64),
    pub epochs_trained: usize,
}

pub fn save_classifier(
    path: &std::path::Path,
    model: &mut ClassifierModel,
    config_hash: &str,
) -> Result<()> {
    let state = ClassifierState {
        cfg: model.cfg.clone(),
        class_weights: model.class_weights,
        epochs_trained: model.epochs_trained,
    };
    let state = serde_json::to_value(&state).map_err(|e| Error::Serde(e.to_string()))?;
    checkpoint::save(path, "classifier", config_hash, &state, model)
}

pub fn load_classifier(path: &std::path::Path) -> Result<ClassifierModel> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "classifier" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("kind is {}, expected classifier", ckpt.header.kind),
        });
    }
    let st: ClassifierState = ckpt.state()?;
    let mut rng = seeded(0, "classifier/init");
    let backbone = build_backbone(&st.cfg.backbone, &mut rng)?;
    let head = Linear::new_plain(backbone.feature_dim(), 1, &mut rng);
    let mut model = ClassifierModel {
        cfg: st.cfg,
        backbone,
        head,
        class_weights: st.class_weights,
        epochs_trained: st.epochs_trained,
    };
    ckpt.restore(&mut model)?;
    Ok(model)
}
