//! Generation phase: WGAN with gradient penalty whose discriminator
//! treats the union of the few-shot set and the previous step's
//! high-confidence synthetic images as "real".
//!
//! Per outer step n: sample one latent batch and generate fakes; update
//! the discriminator `n_critic` times on those fakes against batches
//! drawn uniformly from D ∪ H_{n-1} (with the gradient penalty on
//! real/fake interpolates); update the generator once; query the
//! teacher once on the step's fakes; replace H with the fakes that pass
//! their pseudo-class threshold. H holds at most one generator batch
//! and starts empty.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{filter_high_confidence, records_from_probs, AdaptiveThresholds};
use crate::data::{FewShotSet, ImageShape};
use crate::nn::layers::ParamBind;
use crate::nn::serialize::{self, WeightsError};
use crate::nn::tape::Id;
use crate::nn::{BatchNorm2d, Conv2d, Layer, Linear, RmsProp, Scalar, Sequential, Tape};
use crate::rng::stage_rng;
use crate::teacher::BlackBoxTeacher;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("non-finite loss at step {step}: {which} = {value}")]
    NonFiniteLoss { step: usize, which: &'static str, value: f64 },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("teacher unreachable: {0}")]
    TeacherUnreachable(String),
    #[error("confidence error: {0}")]
    Confidence(#[from] crate::confidence::ConfidenceError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("weights error: {0}")]
    Weights(#[from] WeightsError),
    #[error("empty score set")]
    EmptyScores,
}

/// Network dimensions. The paper-scale default is 256 base feature maps
/// at 8x8; desk presets shrink this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanModelConfig {
    pub latent_dim: usize,
    pub base_maps: usize,
    pub image_shape: ImageShape,
}

impl GanModelConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if self.base_maps % 4 != 0 {
            return Err(GanError::Config("base_maps must be divisible by 4".into()));
        }
        if self.image_shape.h != 32 || self.image_shape.w != 32 {
            return Err(GanError::Config("generator upscales 8x8 to 32x32".into()));
        }
        if self.latent_dim == 0 {
            return Err(GanError::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters (RMSProp 5e-5, batch 250, 5 critic updates
/// per generator update, penalty:loss ratio 10:1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_critic: usize,
    pub gp_coefficient: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl GanTrainConfig {
    pub fn paper_defaults(epochs: usize, seed: u64) -> Self {
        GanTrainConfig {
            learning_rate: 5e-5,
            batch_size: 250,
            n_critic: 5,
            gp_coefficient: 10.0,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.n_critic == 0
            || self.gp_coefficient < 0.0
        {
            return Err(GanError::Config("all training parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Upscaling generator: latent -> base maps at 8x8 -> 16x16 -> 32x32,
/// sigmoid head mapping pixels into [0,1].
pub struct GeneratorNet {
    pub net: Sequential<f32>,
    pub latent_dim: usize,
    pub base_maps: usize,
    pub image_shape: ImageShape,
}

impl GeneratorNet {
    pub fn init(cfg: &GanModelConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.base_maps;
        let c = cfg.image_shape.c;
        let net = Sequential::new(vec![
            Layer::Linear(Linear::new(cfg.latent_dim, b * 8 * 8, rng)),
            Layer::Reshape(vec![b, 8, 8]),
            Layer::Bn(BatchNorm2d::new(b)),
            Layer::LeakyRelu(0.2),
            Layer::UpsampleNearest2,
            Layer::Conv(Conv2d::new(b, b / 2, 3, 1, 1, rng)),
            Layer::Bn(BatchNorm2d::new(b / 2)),
            Layer::LeakyRelu(0.2),
            Layer::UpsampleNearest2,
            Layer::Conv(Conv2d::new(b / 2, b / 4, 3, 1, 1, rng)),
            Layer::Bn(BatchNorm2d::new(b / 4)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::new(b / 4, c, 3, 1, 1, rng)),
            Layer::Sigmoid,
        ]);
        GeneratorNet { net, latent_dim: cfg.latent_dim, base_maps: cfg.base_maps, image_shape: cfg.image_shape }
    }

    pub fn fingerprint(&self) -> String {
        crate::teacher::digest_arrays(&self.net.named_arrays())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), GanError> {
        serialize::save_named(path, &self.net.named_arrays())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P, cfg: &GanModelConfig) -> Result<Self, GanError> {
        let mut rng = stage_rng(0, "load-placeholder");
        let mut g = GeneratorNet::init(cfg, &mut rng);
        let saved = serialize::load_named(path)?;
        serialize::restore_into(saved, g.net.named_arrays_mut())?;
        Ok(g)
    }
}

/// Mirror discriminator: stride-1 entry conv (no batch norm), two
/// stride-2 blocks down to `base` maps at 8x8, linear head to a scalar.
pub struct DiscriminatorNet {
    pub net: Sequential<f32>,
    pub base_maps: usize,
    pub image_shape: ImageShape,
}

impl DiscriminatorNet {
    pub fn init(cfg: &GanModelConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.base_maps;
        let c = cfg.image_shape.c;
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(c, b / 4, 3, 1, 1, rng)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::new(b / 4, b / 2, 3, 2, 1, rng)),
            Layer::Bn(BatchNorm2d::new(b / 2)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::new(b / 2, b, 3, 2, 1, rng)),
            Layer::Bn(BatchNorm2d::new(b)),
            Layer::LeakyRelu(0.2),
            Layer::Flatten,
            Layer::Linear(Linear::new(b * 8 * 8, 1, rng)),
        ]);
        DiscriminatorNet { net, base_maps: cfg.base_maps, image_shape: cfg.image_shape }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), GanError> {
        serialize::save_named(path, &self.net.named_arrays())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P, cfg: &GanModelConfig) -> Result<Self, GanError> {
        let mut rng = stage_rng(0, "load-placeholder");
        let mut d = DiscriminatorNet::init(cfg, &mut rng);
        let saved = serialize::load_named(path)?;
        serialize::restore_into(saved, d.net.named_arrays_mut())?;
        Ok(d)
    }
}

/// Anything that scores image batches on a tape. Lets the penalty and
/// loss builders run against the real discriminator or against analytic
/// test critics, in f32 or f64.
pub trait CriticNet<F: Scalar> {
    fn score_train(&mut self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id;
    fn params_mut(&mut self) -> Vec<&mut ArrayD<F>>;
}

impl<F: Scalar> CriticNet<F> for Sequential<F> {
    fn score_train(&mut self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
        self.forward_train(t, x, bind)
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<F>> {
        self.params_mut()
    }
}

impl CriticNet<f32> for DiscriminatorNet {
    fn score_train(&mut self, t: &mut Tape<f32>, x: Id, bind: &mut ParamBind) -> Id {
        self.net.forward_train(t, x, bind)
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        self.net.params_mut()
    }
}

// ---------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------

/// Generator loss: -mean of the discriminator's scores on fakes.
pub fn loss_g(disc_scores_on_fake: &[f64]) -> Result<f64, GanError> {
    if disc_scores_on_fake.is_empty() {
        return Err(GanError::EmptyScores);
    }
    let m = mean(disc_scores_on_fake);
    finite(-m, "loss_g")
}

/// Discriminator (Wasserstein) loss: mean on fakes minus mean on reals.
pub fn loss_d(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64, GanError> {
    if fake_scores.is_empty() || real_scores.is_empty() {
        return Err(GanError::EmptyScores);
    }
    finite(mean(fake_scores) - mean(real_scores), "loss_d")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finite(v: f64, which: &'static str) -> Result<f64, GanError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GanError::NonFiniteLoss { step: 0, which, value: v })
    }
}

/// Builds mean((|d D/d x_hat|_2 - 1)^2) on the tape. `x_hat` must be a
/// differentiable leaf holding the interpolates.
pub fn gp_on_tape<F: Scalar>(
    t: &mut Tape<F>,
    critic: &mut impl CriticNet<F>,
    bind: &mut ParamBind,
    x_hat: Id,
) -> Id {
    let score = critic.score_train(t, x_hat, bind);
    let ssum = t.sum_all(score);
    let g = t.grad(ssum, &[x_hat])[0].expect("interpolates are differentiable");
    let gsq = t.square(g);
    let axes: Vec<usize> = (1..t.shape(g).len()).collect();
    let pernorm2 = t.sum_axes(gsq, &axes);
    // Tiny epsilon keeps sqrt differentiable at exactly zero gradient;
    // far below every tolerance used in tests.
    let guarded = t.add_scalar(pernorm2, F::from_f64(1e-24));
    let norm = t.sqrt(guarded);
    let dm1 = t.add_scalar(norm, -F::one());
    let sq = t.square(dm1);
    t.mean_all(sq)
}

/// Interpolates eps*real + (1-eps)*fake with per-image eps ~ U(0,1).
pub fn interpolate<F: Scalar>(
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    rng: &mut impl Rng,
) -> ArrayD<F> {
    assert_eq!(real.shape(), fake.shape(), "gradient penalty needs same-shape batches");
    let mut out = real.clone();
    for (i, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
        let eps = F::from_f64(rng.gen_range(0.0..1.0));
        let f = fake.index_axis(Axis(0), i);
        sample.zip_mut_with(&f, |r, &fv| {
            *r = eps * *r + (F::one() - eps) * fv;
        });
    }
    out
}

/// Standalone gradient-penalty evaluation (value only).
pub fn gradient_penalty<F: Scalar>(
    critic: &mut impl CriticNet<F>,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    rng: &mut impl Rng,
) -> Result<f64, GanError> {
    let x_hat = interpolate(real, fake, rng);
    let mut t = Tape::new();
    let mut bind = ParamBind::new();
    let xid = t.var(x_hat);
    let pen = gp_on_tape(&mut t, critic, &mut bind, xid);
    let v = t.scalar(pen).as_f64();
    if !v.is_finite() {
        return Err(GanError::NonFiniteGradient { step: 0 });
    }
    Ok(v)
}

/// Value breakdown of the discriminator objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DLossParts {
    /// mean D(fake) - mean D(real over the union sample): the Eq-5 term.
    pub wasserstein: f64,
    pub gradient_penalty: f64,
    pub total: f64,
}

/// Discriminator loss with the union-sampled real batch: Wasserstein
/// difference plus `gp_coefficient` times the gradient penalty computed
/// on the same sampled real batch.
pub fn loss_d_new<F: Scalar>(
    critic: &mut impl CriticNet<F>,
    fake_batch: &ArrayD<F>,
    real_batch: &ArrayD<F>,
    gp_coefficient: f64,
    rng: &mut impl Rng,
) -> Result<DLossParts, GanError> {
    let mut t = Tape::new();
    let mut bind = ParamBind::new();
    let f = t.constant(fake_batch.clone());
    let r = t.constant(real_batch.clone());
    let fs = critic.score_train(&mut t, f, &mut bind);
    let rs = critic.score_train(&mut t, r, &mut bind);
    let fmean = t.mean_all(fs);
    let rmean = t.mean_all(rs);
    let wass = t.sub(fmean, rmean);
    let x_hat = interpolate(real_batch, fake_batch, rng);
    let xid = t.var(x_hat);
    let pen = gp_on_tape(&mut t, critic, &mut bind, xid);
    let w = t.scalar(wass).as_f64();
    let p = t.scalar(pen).as_f64();
    let total = w + gp_coefficient * p;
    if !total.is_finite() {
        return Err(GanError::NonFiniteLoss { step: 0, which: "loss_d_new", value: total });
    }
    Ok(DLossParts { wasserstein: w, gradient_penalty: p, total })
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

/// Synthetic images from one generator step that passed their
/// pseudo-class threshold; the discriminator's extra "real" pool for
/// the next step.
#[derive(Debug, Clone)]
pub struct HighConfidenceSet {
    pub images: Array4<f32>,
    /// Outer step that produced these images.
    pub step: usize,
}

impl HighConfidenceSet {
    pub fn empty() -> Self {
        HighConfidenceSet { images: Array4::zeros((0, 0, 0, 0)), step: 0 }
    }

    pub fn len(&self) -> usize {
        if self.images.shape().contains(&0) {
            0
        } else {
            self.images.shape()[0]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One outer-step record of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d_wasserstein: f64,
    pub loss_d_gp: f64,
    pub h_size: usize,
    pub d_updates: usize,
    pub teacher_calls: u64,
}

pub struct TrainedGan {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub log: Vec<GanStepRecord>,
    /// H from the last outer step, retained so tests and diagnostics can
    /// re-verify the confidence certificate on stored samples.
    pub final_h: HighConfidenceSet,
}

/// Draws `count` images uniformly (with replacement) from the multiset
/// union of the few-shot images and H.
fn sample_union(
    fewshot: &Array4<f32>,
    h: &HighConfidenceSet,
    count: usize,
    rng: &mut impl Rng,
) -> Array4<f32> {
    let n = fewshot.shape()[0];
    let m = h.len();
    let s = fewshot.dim();
    let mut out = Array4::zeros((count, s.1, s.2, s.3));
    for row in 0..count {
        let pick = rng.gen_range(0..n + m);
        let src = if pick < n {
            fewshot.index_axis(Axis(0), pick)
        } else {
            h.images.index_axis(Axis(0), pick - n)
        };
        out.index_axis_mut(Axis(0), row).assign(&src);
    }
    out
}

pub fn sample_latents(batch: usize, latent_dim: usize, rng: &mut (impl Rng + ?Sized)) -> Array2<f32> {
    let data: Vec<f32> = (0..batch * latent_dim)
        .map(|_| f32::standard_normal(rng))
        .collect();
    Array2::from_shape_vec((batch, latent_dim), data).unwrap()
}

/// Stage-1 training loop.
pub fn train_gan<T: BlackBoxTeacher + ?Sized>(
    fewshot: &FewShotSet,
    teacher: &T,
    thresholds: &AdaptiveThresholds,
    model_cfg: &GanModelConfig,
    cfg: &GanTrainConfig,
) -> Result<TrainedGan, GanError> {
    model_cfg.validate()?;
    cfg.validate()?;

    let mut init_g = stage_rng(cfg.seed, "gan.init_g");
    let mut init_d = stage_rng(cfg.seed, "gan.init_d");
    let mut generator = GeneratorNet::init(model_cfg, &mut init_g);
    let mut discriminator = DiscriminatorNet::init(model_cfg, &mut init_d);

    let mut latent_rng = stage_rng(cfg.seed, "gan.latent");
    let mut real_rng = stage_rng(cfg.seed, "gan.real_sample");
    let mut gp_rng = stage_rng(cfg.seed, "gan.gp");

    let mut opt_g = RmsProp::<f32>::new(cfg.learning_rate);
    let mut opt_d = RmsProp::<f32>::new(cfg.learning_rate);

    let mut h = HighConfidenceSet::empty();
    let steps_per_epoch = fewshot.len().div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut teacher_calls: u64 = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            // One latent batch per outer step; its fakes serve the
            // critic updates, the generator update and H construction.
            let z = sample_latents(cfg.batch_size, generator.latent_dim, &mut latent_rng);
            let mut tape_g = Tape::<f32>::new();
            let mut bind_g = ParamBind::new();
            let zid = tape_g.constant(z.into_dyn());
            let fakes_id = generator.net.forward_train(&mut tape_g, zid, &mut bind_g);
            let fakes_val: ArrayD<f32> = tape_g.value(fakes_id).clone();

            let mut wass_last = 0.0;
            let mut gp_last = 0.0;
            for _ in 0..cfg.n_critic {
                let reals = sample_union(&fewshot.images, &h, cfg.batch_size, &mut real_rng)
                    .into_dyn();
                let x_hat = interpolate(&reals, &fakes_val, &mut gp_rng);

                let mut t = Tape::<f32>::new();
                let mut bind = ParamBind::new();
                let f = t.constant(fakes_val.clone());
                let r = t.constant(reals);
                let fs = discriminator.net.forward_train(&mut t, f, &mut bind);
                let rs = discriminator.net.forward_train(&mut t, r, &mut bind);
                let fmean = t.mean_all(fs);
                let rmean = t.mean_all(rs);
                let wass = t.sub(fmean, rmean);
                let xid = t.var(x_hat);
                let pen = gp_on_tape(&mut t, &mut discriminator, &mut bind, xid);
                let scaled = t.scale(pen, cfg.gp_coefficient as f32);
                let total = t.add(wass, scaled);

                wass_last = t.scalar(wass) as f64;
                gp_last = t.scalar(pen) as f64;
                let tv = t.scalar(total) as f64;
                if !tv.is_finite() {
                    return Err(GanError::NonFiniteLoss { step, which: "loss_d_new", value: tv });
                }
                let grads = t.grad(total, &bind.ids);
                let gv: Vec<ArrayD<f32>> = grads
                    .iter()
                    .zip(discriminator.net.params())
                    .map(|(g, p)| match g {
                        Some(id) => t.value(*id).clone(),
                        // A parameter the loss cannot see (e.g. a bias
                        // absorbed by a following batch norm) has zero
                        // gradient.
                        None => ArrayD::zeros(p.raw_dim()),
                    })
                    .collect();
                if gv.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(GanError::NonFiniteGradient { step });
                }
                opt_d.step(discriminator.net.params_mut(), &gv);
            }

            // Generator update on the same latent batch, against the
            // freshly updated discriminator. The discriminator's
            // parameters enter this graph but are not differentiated.
            let mut bind_d_unused = ParamBind::new();
            let g_scores =
                discriminator.net.forward_train(&mut tape_g, fakes_id, &mut bind_d_unused);
            let gmean = tape_g.mean_all(g_scores);
            let lg = tape_g.neg(gmean);
            let lgv = tape_g.scalar(lg) as f64;
            if !lgv.is_finite() {
                return Err(GanError::NonFiniteLoss { step, which: "loss_g", value: lgv });
            }
            let grads = tape_g.grad(lg, &bind_g.ids);
            let gv: Vec<ArrayD<f32>> = grads
                .iter()
                .zip(generator.net.params())
                .map(|(g, p)| match g {
                    Some(id) => tape_g.value(*id).clone(),
                    None => ArrayD::zeros(p.raw_dim()),
                })
                .collect();
            if gv.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(GanError::NonFiniteGradient { step });
            }
            opt_g.step(generator.net.params_mut(), &gv);
            drop(tape_g);

            // One teacher query on this step's generated batch; the
            // qualifying images replace H for the next step.
            let fakes4 = fakes_val
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .to_owned();
            let probs = teacher
                .predict_proba(&fakes4)
                .map_err(|e| GanError::TeacherUnreachable(e.to_string()))?;
            teacher_calls += 1;
            let records = records_from_probs(&probs);
            let filtered = filter_high_confidence(&fakes4, &records, thresholds)?;
            h = HighConfidenceSet { images: filtered.images, step };

            log.push(GanStepRecord {
                step,
                epoch,
                loss_g: lgv,
                loss_d_wasserstein: wass_last,
                loss_d_gp: gp_last,
                h_size: h.len(),
                d_updates: cfg.n_critic,
                teacher_calls,
            });
            step += 1;
        }
    }

    Ok(TrainedGan { generator, discriminator, log, final_h: h })
}

/// Samples `count` images from the trained generator in eval mode
/// (frozen batch-norm statistics), chunked to bound memory.
pub fn sample_synthetic(
    generator: &GeneratorNet,
    count: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Array4<f32> {
    let shape = generator.image_shape;
    let mut out = Array4::zeros((count, shape.c, shape.h, shape.w));
    let chunk = 500;
    let mut row = 0;
    while row < count {
        let n = chunk.min(count - row);
        let z = sample_latents(n, generator.latent_dim, rng);
        let mut t = Tape::<f32>::new();
        let zid = t.constant(z.into_dyn());
        let y = generator.net.forward_eval(&mut t, zid);
        let imgs = t.value(y).view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
        out.slice_mut(ndarray::s![row..row + n, .., .., ..]).assign(&imgs);
        row += n;
    }
    out
}

/// Sidecar metadata for generator/discriminator checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanSidecar {
    pub model: GanModelConfig,
    pub steps: usize,
    pub config_hash: String,
}

impl GanSidecar {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> std::io::Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Test critics with analytically known input gradients.
pub mod test_critics {
    use super::*;

    /// D(x) = w . x + b: input gradient is w everywhere, so the penalty
    /// is (|w| - 1)^2 for any inputs.
    pub struct LinearCritic<F: Scalar> {
        pub w: ArrayD<F>,
        pub b: F,
    }

    impl<F: Scalar> CriticNet<F> for LinearCritic<F> {
        fn score_train(&mut self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
            let b = t.shape(x)[0];
            let n: usize = t.shape(x)[1..].iter().product();
            let flat = t.reshape(x, &[b, n]);
            let w = bind.bind(t, &self.w);
            let wc = t.reshape(w, &[n, 1]);
            let y = t.matmul(flat, wc);
            t.add_scalar(y, self.b)
        }

        fn params_mut(&mut self) -> Vec<&mut ArrayD<F>> {
            vec![&mut self.w]
        }
    }

    /// D(x) = |x|^2 / 2 per sample: input gradient is x itself, so a
    /// sample at radius r contributes (r - 1)^2.
    pub struct QuadraticCritic;

    impl<F: Scalar> CriticNet<F> for QuadraticCritic {
        fn score_train(&mut self, t: &mut Tape<F>, x: Id, _bind: &mut ParamBind) -> Id {
            let b = t.shape(x)[0];
            let n: usize = t.shape(x)[1..].iter().product();
            let flat = t.reshape(x, &[b, n]);
            let sq = t.square(flat);
            let s = t.sum_axes(sq, &[1]);
            t.scale(s, F::from_f64(0.5))
        }

        fn params_mut(&mut self) -> Vec<&mut ArrayD<F>> {
            vec![]
        }
    }
}

/// Convenience: zero-filled image batch in the dynamic layout the
/// critics consume.
pub fn zero_batch(b: usize, shape: ImageShape) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(&[b, shape.c, shape.h, shape.w]))
}

#[cfg(test)]
#[path = "gan_tests.rs"]
mod tests;
