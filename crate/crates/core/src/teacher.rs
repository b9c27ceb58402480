//! Classifier training and the black-box teacher boundary.
//!
//! Classifiers are trained here for both teacher and student roles. A
//! trained classifier is only ever exposed to the rest of the pipeline
//! through [`BlackBoxTeacher`]: softmax probabilities go out, logits,
//! features, weights and gradients do not. The softmax happens inside
//! the wrapper and the logits are dropped before returning, so the
//! boundary is physical, not just conventional.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ProbVector;
use crate::data::{augment, AugmentationPolicy, ImageBatch, ImageShape, Label};
use crate::nn::layers::{fan_in_uniform, ParamBind};
use crate::nn::serialize::{self, WeightsError};
use crate::nn::{BatchNorm2d, Conv2d, Layer, Linear, MultiStepLr, Sequential, SgdMomentum, Tape};
use crate::rng::stage_rng;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("teacher unreachable: {0}")]
    Unreachable(String),
    #[error("protocol version mismatch: server speaks {0}")]
    ProtocolVersionMismatch(u32),
    #[error("incompatible input shape: {0}")]
    IncompatibleShape(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("weights error: {0}")]
    Weights(#[from] WeightsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Supported classifier families. The -Half variants have half the
/// channel count of the base at every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierArch {
    Lenet5,
    Lenet5Half,
    AlexnetLike,
    AlexnetHalf,
    SmallResnet,
}

impl ClassifierArch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lenet5" => Some(Self::Lenet5),
            "lenet5-half" => Some(Self::Lenet5Half),
            "alexnet-like" => Some(Self::AlexnetLike),
            "alexnet-half" => Some(Self::AlexnetHalf),
            "small-resnet" => Some(Self::SmallResnet),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lenet5 => "lenet5",
            Self::Lenet5Half => "lenet5-half",
            Self::AlexnetLike => "alexnet-like",
            Self::AlexnetHalf => "alexnet-half",
            Self::SmallResnet => "small-resnet",
        }
    }
}

/// SGD recipe for classifier training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub base_lr: f64,
    /// Fractions of total progress at which lr decays by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl ClassifierTrainConfig {
    /// Fixed 1e-2, the MNIST/FMNIST recipe.
    pub fn fixed_lr(epochs: usize, batch_size: usize) -> Self {
        ClassifierTrainConfig {
            base_lr: 1e-2,
            milestones: vec![],
            gamma: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size,
            epochs,
        }
    }

    /// 1e-1 decayed x0.1 at 50% and 75% progress, the recipe for the
    /// other datasets.
    pub fn stepped_lr(epochs: usize, batch_size: usize) -> Self {
        ClassifierTrainConfig {
            base_lr: 1e-1,
            milestones: vec![0.5, 0.75],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.base_lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err("learning parameters must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.milestones.iter().any(|&m| m <= 0.0 || m >= 1.0) {
            return Err("milestones must lie strictly inside (0,1)".into());
        }
        Ok(())
    }
}

/// A trained (or initialized) classifier.
pub struct Classifier {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub input_shape: ImageShape,
    pub net: Sequential<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
}

impl Classifier {
    pub fn init(
        arch: ClassifierArch,
        num_classes: usize,
        input_shape: ImageShape,
        rng: &mut impl Rng,
    ) -> Self {
        let net = build_arch(arch, num_classes, input_shape, rng);
        Classifier { arch, num_classes, input_shape, net }
    }

    /// Eval-mode logits; parameters frozen, batch-norm on running stats.
    pub fn logits_eval(&self, images: &Array4<f32>) -> Result<Array2<f32>, TeacherError> {
        let s = images.shape();
        if (s[1], s[2], s[3]) != (self.input_shape.c, self.input_shape.h, self.input_shape.w) {
            return Err(TeacherError::ShapeMismatch(format!(
                "batch {:?} vs expected {:?}",
                &s[1..],
                self.input_shape
            )));
        }
        let mut out = Array2::zeros((s[0], self.num_classes));
        // Bounded chunks keep tape memory flat for large batches.
        let chunk = 512;
        let mut row = 0;
        for sub in images.axis_chunks_iter(Axis(0), chunk) {
            let mut t = Tape::<f32>::new();
            let x = t.constant(sub.to_owned().into_dyn());
            let y = self.net.forward_eval(&mut t, x);
            let v = t.value(y);
            let v2 = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            out.slice_mut(ndarray::s![row..row + sub.shape()[0], ..]).assign(&v2);
            row += sub.shape()[0];
        }
        Ok(out)
    }

    /// Argmax predictions in eval mode.
    pub fn predict_labels(&self, images: &Array4<f32>) -> Result<Vec<Label>, TeacherError> {
        let logits = self.logits_eval(images)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0usize;
                for i in 1..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best as Label
            })
            .collect())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), TeacherError> {
        let named = self.net.named_arrays();
        serialize::save_named(path, &named)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(
        path: P,
        arch: ClassifierArch,
        num_classes: usize,
        input_shape: ImageShape,
    ) -> Result<Self, TeacherError> {
        let mut rng = stage_rng(0, "load-placeholder");
        let mut c = Classifier::init(arch, num_classes, input_shape, &mut rng);
        let saved = serialize::load_named(path)?;
        serialize::restore_into(saved, c.net.named_arrays_mut())?;
        Ok(c)
    }

    /// SHA-256 over the serialized weights; the model identity used by
    /// manifests and the serving protocol.
    pub fn fingerprint(&self) -> String {
        digest_arrays(&self.net.named_arrays())
    }
}

pub fn digest_arrays(named: &[(String, &ArrayD<f32>)]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, arr) in named {
        hasher.update(name.as_bytes());
        for &d in arr.shape() {
            hasher.update((d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    serialize::hex_digest(&hasher.finalize())
}

fn build_arch(
    arch: ClassifierArch,
    k: usize,
    shape: ImageShape,
    rng: &mut impl Rng,
) -> Sequential<f32> {
    match arch {
        ClassifierArch::Lenet5 => lenet(k, shape, 1, rng),
        ClassifierArch::Lenet5Half => lenet(k, shape, 2, rng),
        ClassifierArch::AlexnetLike => alexnet(k, shape, 1, rng),
        ClassifierArch::AlexnetHalf => alexnet(k, shape, 2, rng),
        ClassifierArch::SmallResnet => small_resnet(k, shape, rng),
    }
}

fn lenet(k: usize, shape: ImageShape, div: usize, rng: &mut impl Rng) -> Sequential<f32> {
    assert_eq!((shape.h, shape.w), (32, 32), "lenet expects 32x32 inputs");
    let c1 = 6 / div;
    let c2 = 16 / div;
    let f1 = 120 / div;
    let f2 = 84 / div;
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(shape.c, c1, 5, 1, 0, rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Conv(Conv2d::new(c1, c2, 5, 1, 0, rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::Linear(Linear::new(c2 * 5 * 5, f1, rng)),
        Layer::Relu,
        Layer::Linear(Linear::new(f1, f2, rng)),
        Layer::Relu,
        Layer::Linear(Linear::new(f2, k, rng)),
    ])
}

fn alexnet(k: usize, shape: ImageShape, div: usize, rng: &mut impl Rng) -> Sequential<f32> {
    assert_eq!((shape.h, shape.w), (32, 32), "alexnet-like expects 32x32 inputs");
    let c = [64 / div, 192 / div, 256 / div, 256 / div];
    let f = 512 / div;
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(shape.c, c[0], 3, 1, 1, rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Conv(Conv2d::new(c[0], c[1], 3, 1, 1, rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Conv(Conv2d::new(c[1], c[2], 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(c[2], c[3], 3, 1, 1, rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::Linear(Linear::new(c[3] * 4 * 4, f, rng)),
        Layer::Relu,
        Layer::Linear(Linear::new(f, k, rng)),
    ])
}

fn small_resnet(k: usize, shape: ImageShape, rng: &mut impl Rng) -> Sequential<f32> {
    assert_eq!((shape.h, shape.w), (32, 32), "small-resnet expects 32x32 inputs");
    fn block(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Layer<f32> {
        let main = vec![
            Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, rng)),
            Layer::Bn(BatchNorm2d::new(cout)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(cout, cout, 3, 1, 1, rng)),
            Layer::Bn(BatchNorm2d::new(cout)),
        ];
        let short = if cin == cout && stride == 1 {
            vec![]
        } else {
            vec![
                Layer::Conv(Conv2d::new(cin, cout, 1, stride, 0, rng)),
                Layer::Bn(BatchNorm2d::new(cout)),
            ]
        };
        Layer::Residual(main, short)
    }
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(shape.c, 16, 3, 1, 1, rng)),
        Layer::Bn(BatchNorm2d::new(16)),
        Layer::Relu,
        block(16, 16, 1, rng),
        Layer::Relu,
        block(16, 32, 2, rng),
        Layer::Relu,
        block(32, 64, 2, rng),
        Layer::Relu,
        // global average pool via sum: handled as flatten + linear over 8x8
        Layer::Flatten,
        Layer::Linear(Linear::new(64 * 8 * 8, k, rng)),
    ])
}

/// Mean cross-entropy against hard labels, built on the tape.
pub(crate) fn ce_loss_on_tape(
    t: &mut Tape<f32>,
    logits: crate::nn::Id,
    onehot: &Array2<f32>,
) -> crate::nn::Id {
    let batch = onehot.shape()[0] as f64;
    let ls = log_softmax_on_tape(t, logits);
    let targets = t.constant(onehot.clone().into_dyn());
    let prod = t.mul(targets, ls);
    let total = t.sum_all(prod);
    let neg = t.neg(total);
    t.scale(neg, (1.0 / batch) as f32)
}

pub(crate) fn log_softmax_on_tape(t: &mut Tape<f32>, logits: crate::nn::Id) -> crate::nn::Id {
    let m = t.detached_max_axis(logits, 1);
    let shifted = t.sub(logits, m);
    let e = t.exp(shifted);
    let s = t.sum_axes(e, &[1]);
    let lse = t.ln(s);
    t.sub(shifted, lse)
}

pub fn one_hot(labels: &[Label], k: usize) -> Array2<f32> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l as usize]] = 1.0;
    }
    out
}

/// Trains a classifier with plain cross-entropy on hard labels,
/// applying the dataset augmentation policy per batch.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    arch: ClassifierArch,
    num_classes: usize,
    input_shape: ImageShape,
    train: &ImageBatch,
    test: &ImageBatch,
    policy: &AugmentationPolicy,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(Classifier, Vec<EpochLog>), TeacherError> {
    cfg.validate().map_err(TeacherError::ShapeMismatch)?;
    let labels = train.labels.as_ref().expect("training set must be labeled");
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(TeacherError::ShapeMismatch(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }

    let mut init_rng = stage_rng(seed, "classifier.init");
    let mut clf = Classifier::init(arch, num_classes, input_shape, &mut init_rng);
    let mut shuffle_rng = stage_rng(seed, "classifier.shuffle");
    let mut augment_rng = stage_rng(seed, "classifier.augment");

    let schedule = MultiStepLr::at_progress(cfg.base_lr, cfg.milestones.clone(), cfg.gamma);
    let mut opt = SgdMomentum::<f32>::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        opt.lr = schedule.lr(epoch, cfg.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let images = if policy.is_empty() {
                batch.images
            } else {
                augment(&batch.images, policy, &mut augment_rng)
                    .map_err(|e| TeacherError::ShapeMismatch(e.to_string()))?
            };
            let onehot = one_hot(batch.labels.as_ref().unwrap(), num_classes);

            let mut t = Tape::<f32>::new();
            let mut bind = ParamBind::new();
            let x = t.constant(images.into_dyn());
            let logits = clf.net.forward_train(&mut t, x, &mut bind);
            let loss = ce_loss_on_tape(&mut t, logits, &onehot);
            let lv = t.scalar(loss) as f64;
            if !lv.is_finite() {
                return Err(TeacherError::DivergedTraining { step, loss: lv });
            }
            loss_sum += lv;
            batches += 1;
            let grads = t.grad(loss, &bind.ids);
            let grad_values: Vec<ArrayD<f32>> = grads
                .iter()
                .map(|g| t.value(g.expect("all params reachable")).clone())
                .collect();
            opt.step(clf.net.params_mut(), &grad_values);
            step += 1;
        }
        let acc = accuracy_of(&clf, test)?;
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            test_accuracy: acc,
            lr: opt.lr,
        });
    }
    Ok((clf, log))
}

pub fn accuracy_of(clf: &Classifier, test: &ImageBatch) -> Result<f64, TeacherError> {
    let labels = test.labels.as_ref().expect("test set must be labeled");
    let preds = clf.predict_labels(&test.images)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------
// The black-box boundary
// ---------------------------------------------------------------------

/// The only view of a teacher the pipeline gets: class count, expected
/// input shape, and softmax probabilities. No logits, no gradients, no
/// parameters. The interface-audit test enumerates these capabilities
/// and fails if any are added.
pub trait BlackBoxTeacher: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> ImageShape;
    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError>;
}

/// In-process teacher: wraps a classifier, converts logits to f64
/// softmax probabilities and discards the logits.
pub struct InProcessTeacher {
    classifier: Classifier,
}

impl InProcessTeacher {
    pub fn new(classifier: Classifier) -> Self {
        InProcessTeacher { classifier }
    }

    pub fn fingerprint(&self) -> String {
        self.classifier.fingerprint()
    }

    /// Access for serving and persistence; not part of the black-box
    /// teacher interface.
    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }
}

impl BlackBoxTeacher for InProcessTeacher {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    fn input_shape(&self) -> ImageShape {
        self.classifier.input_shape
    }

    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
        let logits = self.classifier.logits_eval(images)?;
        Ok(softmax_rows(&logits))
    }
}

/// Softmax per row, computed in f64.
pub fn softmax_rows(logits: &Array2<f32>) -> Vec<ProbVector> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            ProbVector::new(exps.into_iter().map(|e| e / sum).collect())
                .expect("softmax output is a valid probability vector")
        })
        .collect()
}

/// Decorator that counts queries (calls and images) across threads.
pub struct CountingTeacher<T: BlackBoxTeacher> {
    inner: T,
    calls: AtomicU64,
    images: AtomicU64,
}

impl<T: BlackBoxTeacher> CountingTeacher<T> {
    pub fn new(inner: T) -> Self {
        CountingTeacher { inner, calls: AtomicU64::new(0), images: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn images(&self) -> u64 {
        self.images.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: BlackBoxTeacher> BlackBoxTeacher for CountingTeacher<T> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_shape(&self) -> ImageShape {
        self.inner.input_shape()
    }

    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.images.fetch_add(images.shape()[0] as u64, Ordering::Relaxed);
        self.inner.predict_proba(images)
    }
}

impl<T: BlackBoxTeacher + ?Sized> BlackBoxTeacher for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_shape(&self) -> ImageShape {
        (**self).input_shape()
    }
    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
        (**self).predict_proba(images)
    }
}

impl BlackBoxTeacher for std::sync::Arc<dyn BlackBoxTeacher> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_shape(&self) -> ImageShape {
        (**self).input_shape()
    }
    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
        (**self).predict_proba(images)
    }
}

/// Fan-in-uniform draw exposed for test fixtures that need raw arrays.
pub fn init_array(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f32> {
    fan_in_uniform(shape, fan_in, rng)
}

/// Sidecar metadata stored next to serialized classifier weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub input_shape: ImageShape,
    pub train_config_hash: String,
}

impl ClassifierSidecar {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> std::io::Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

