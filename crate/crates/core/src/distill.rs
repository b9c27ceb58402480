//! Distillation phase: class-balanced synthetic set via rejection
//! sampling, distillation-set assembly, the teacher-supervised losses
//! and student training for the four baselines (Student-Full,
//! Student-Alone, Standard-KD, DivBFKD).

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{pseudo_label, ProbVector};
use crate::data::{augment, AugmentationPolicy, FewShotSet, ImageBatch, ImageShape, Label};
use crate::gan::{sample_synthetic, GeneratorNet};
use crate::nn::layers::ParamBind;
use crate::nn::{MultiStepLr, SgdMomentum, Tape};
use crate::rng::stage_rng;
use crate::teacher::{
    accuracy_of, ce_loss_on_tape, one_hot, BlackBoxTeacher, Classifier, ClassifierArch,
    ClassifierTrainConfig, EpochLog, TeacherError,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("synthetic budget {budget} is not divisible by {classes} classes")]
    NonDivisibleBudget { budget: usize, classes: usize },
    #[error("class {0} still unfilled after the generation cap")]
    ClassStarvation(usize),
    #[error("max_attempts {max_attempts} below budget {budget}")]
    CapBelowBudget { max_attempts: u64, budget: usize },
    #[error("teacher unreachable: {0}")]
    TeacherUnreachable(String),
    #[error("objective requires {0}")]
    SourceMismatch(String),
    #[error("lambda {0} outside [0,1]")]
    InvalidLambda(f64),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
}

/// Anything that can produce synthetic image batches; the trained
/// generator is the real source, tests substitute degenerate ones.
pub trait SyntheticSource {
    fn sample(&self, count: usize, rng: &mut dyn rand::RngCore) -> Array4<f32>;
    fn fingerprint(&self) -> String;
}

impl SyntheticSource for GeneratorNet {
    fn sample(&self, count: usize, rng: &mut dyn rand::RngCore) -> Array4<f32> {
        sample_synthetic(self, count, rng)
    }

    fn fingerprint(&self) -> String {
        GeneratorNet::fingerprint(self)
    }
}

/// M synthetic images, exactly M/K per pseudo-class, each carrying the
/// teacher's full probability vector.
#[derive(Debug, Clone)]
pub struct LabeledSyntheticSet {
    pub images: Array4<f32>,
    pub soft_labels: Vec<ProbVector>,
    pub pseudo_labels: Vec<usize>,
    /// Images generated per pseudo-class over the whole rejection run.
    pub per_class_attempts: Vec<u64>,
    pub attempts_total: u64,
    pub generator_fingerprint: String,
}

impl LabeledSyntheticSet {
    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    pub fn empty(shape: ImageShape) -> Self {
        LabeledSyntheticSet {
            images: Array4::zeros((0, shape.c, shape.h, shape.w)),
            soft_labels: Vec::new(),
            pseudo_labels: Vec::new(),
            per_class_attempts: Vec::new(),
            attempts_total: 0,
            generator_fingerprint: String::new(),
        }
    }
}

/// Rejection-samples the generator until every pseudo-class holds
/// exactly `m / K` images. An image is kept iff its pseudo-class quota
/// is still open; `max_attempts` caps the total number of generated
/// images (the pipeline default is 200x the budget).
pub fn generate_balanced<T: BlackBoxTeacher + ?Sized, S: SyntheticSource + ?Sized>(
    source: &S,
    teacher: &T,
    m: usize,
    rng: &mut impl Rng,
    max_attempts: u64,
) -> Result<LabeledSyntheticSet, DistillError> {
    let k = teacher.num_classes();
    if m % k != 0 {
        return Err(DistillError::NonDivisibleBudget { budget: m, classes: k });
    }
    if max_attempts < m as u64 {
        return Err(DistillError::CapBelowBudget { max_attempts, budget: m });
    }
    let quota = m / k;
    let shape = teacher.input_shape();

    let mut kept_images: Vec<Array4<f32>> = Vec::new();
    let mut kept_rows: Vec<(usize, ProbVector, usize)> = Vec::new(); // (global row, probs, label)
    let mut per_class_kept = vec![0usize; k];
    let mut per_class_attempts = vec![0u64; k];
    let mut attempts_total = 0u64;
    let mut filled = 0usize;

    let gen_batch = 500.min(m.max(1));
    while filled < m {
        if attempts_total >= max_attempts {
            let starving = per_class_kept
                .iter()
                .position(|&c| c < quota)
                .expect("unfilled class exists");
            return Err(DistillError::ClassStarvation(starving));
        }
        let n = gen_batch.min((max_attempts - attempts_total) as usize);
        let batch = source.sample(n, rng);
        let probs = teacher
            .predict_proba(&batch)
            .map_err(|e| DistillError::TeacherUnreachable(e.to_string()))?;
        let mut keep_rows_local: Vec<usize> = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            let label = pseudo_label(p);
            per_class_attempts[label] += 1;
            attempts_total += 1;
            if per_class_kept[label] < quota {
                per_class_kept[label] += 1;
                filled += 1;
                keep_rows_local.push(i);
                kept_rows.push((kept_rows.len(), p.clone(), label));
            }
            if filled == m {
                break;
            }
        }
        if !keep_rows_local.is_empty() {
            let sel = ImageBatch::unlabeled(batch).select(&keep_rows_local);
            kept_images.push(sel.images);
        }
    }

    let mut images = Array4::zeros((m, shape.c, shape.h, shape.w));
    let mut row = 0;
    for block in kept_images {
        let n = block.shape()[0];
        images
            .slice_mut(ndarray::s![row..row + n, .., .., ..])
            .assign(&block);
        row += n;
    }

    Ok(LabeledSyntheticSet {
        images,
        soft_labels: kept_rows.iter().map(|(_, p, _)| p.clone()).collect(),
        pseudo_labels: kept_rows.iter().map(|(_, _, l)| *l).collect(),
        per_class_attempts,
        attempts_total,
        generator_fingerprint: source.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

/// N real images plus M balanced synthetics, all soft-labeled by the
/// teacher. Ground-truth labels of the real part are bookkeeping only;
/// the soft-CE objective never reads them.
pub struct DistillationSet {
    pub images: Array4<f32>,
    pub soft_labels: Vec<ProbVector>,
    pub origins: Vec<Origin>,
    pub hard_labels: Vec<Option<Label>>,
    pub n_real: usize,
    pub m_synth: usize,
}

impl DistillationSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Assembles the distillation set: the teacher soft-labels the real
/// images once here, and the cached vectors are reused for the whole
/// student training.
pub fn build_distill_set<T: BlackBoxTeacher + ?Sized>(
    fewshot: &FewShotSet,
    synth: &LabeledSyntheticSet,
    teacher: &T,
) -> Result<DistillationSet, DistillError> {
    let n = fewshot.len();
    let m = synth.len();
    let real_probs = teacher
        .predict_proba(&fewshot.images)
        .map_err(|e| DistillError::TeacherUnreachable(e.to_string()))?;

    let s = fewshot.images.dim();
    let mut images = Array4::zeros((n + m, s.1, s.2, s.3));
    images.slice_mut(ndarray::s![..n, .., .., ..]).assign(&fewshot.images);
    if m > 0 {
        images.slice_mut(ndarray::s![n.., .., .., ..]).assign(&synth.images);
    }

    let mut soft_labels = real_probs;
    soft_labels.extend(synth.soft_labels.iter().cloned());
    let mut origins = vec![Origin::Real; n];
    origins.extend(std::iter::repeat(Origin::Synthetic).take(m));
    let mut hard_labels: Vec<Option<Label>> = fewshot.labels.iter().map(|&l| Some(l)).collect();
    hard_labels.extend(std::iter::repeat(None).take(m));

    Ok(DistillationSet { images, soft_labels, origins, hard_labels, n_real: n, m_synth: m })
}

// ---------------------------------------------------------------------
// Losses (value helpers in f64; training uses tape equivalents)
// ---------------------------------------------------------------------

const LOG_EPS: f64 = 1e-12;

fn ce_rows(student: &[ProbVector], target: &[ProbVector]) -> f64 {
    debug_assert_eq!(student.len(), target.len());
    let mut total = 0.0;
    for (s, t) in student.iter().zip(target) {
        for (sv, tv) in s.values().iter().zip(t.values()) {
            total -= tv * sv.max(LOG_EPS).ln();
        }
    }
    total / student.len() as f64
}

/// Mean cross-entropy of the student's probabilities against the
/// teacher's: the distillation objective.
pub fn kd_loss(student: &[ProbVector], teacher: &[ProbVector]) -> f64 {
    ce_rows(student, teacher)
}

/// Mean Shannon entropy of a batch of probability vectors.
pub fn mean_entropy(probs: &[ProbVector]) -> f64 {
    let mut total = 0.0;
    for p in probs {
        for &v in p.values() {
            if v > 0.0 {
                total -= v * v.max(LOG_EPS).ln();
            }
        }
    }
    total / probs.len() as f64
}

/// Standard-KD objective: (1-lambda) CE against hard labels plus
/// lambda KL(teacher || student), means over the batch. No temperature:
/// that would need the teacher's logits.
pub fn standard_kd_loss(
    student: &[ProbVector],
    teacher: &[ProbVector],
    hard_labels: &[Label],
    lambda: f64,
) -> Result<f64, DistillError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DistillError::InvalidLambda(lambda));
    }
    let mut ce_hard = 0.0;
    for (s, &y) in student.iter().zip(hard_labels) {
        ce_hard -= s.values()[y as usize].max(LOG_EPS).ln();
    }
    ce_hard /= student.len() as f64;
    let kl = ce_rows(student, teacher) - mean_entropy(teacher);
    Ok((1.0 - lambda) * ce_hard + lambda * kl)
}

// ---------------------------------------------------------------------
// Student training
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Plain cross-entropy on ground-truth labels.
    PlainCe,
    /// Cross-entropy against the teacher's probability vectors.
    SoftCe,
    /// The mixed hard/soft objective with balance `lambda`.
    StandardKd { lambda: f64 },
}

/// What the student trains on.
pub enum TrainSource<'a> {
    /// A labeled image set (Student-Full / Student-Alone).
    Labeled(&'a ImageBatch),
    /// A distillation set with cached teacher labels.
    Distill(&'a DistillationSet),
}

/// Trains a student. Real-origin images follow the dataset augmentation
/// policy; synthetic images are used as-is.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    arch: ClassifierArch,
    num_classes: usize,
    input_shape: ImageShape,
    source: &TrainSource<'_>,
    objective: Objective,
    test: &ImageBatch,
    policy: &AugmentationPolicy,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(Classifier, Vec<EpochLog>), DistillError> {
    match (&objective, source) {
        (Objective::PlainCe, TrainSource::Labeled(b)) if b.labels.is_none() => {
            return Err(DistillError::SourceMismatch("hard labels".into()));
        }
        (Objective::SoftCe, TrainSource::Labeled(_)) => {
            return Err(DistillError::SourceMismatch("teacher soft labels".into()));
        }
        (Objective::StandardKd { .. }, TrainSource::Labeled(_)) => {
            return Err(DistillError::SourceMismatch("teacher soft labels".into()));
        }
        (Objective::StandardKd { lambda }, _) if !(0.0..=1.0).contains(lambda) => {
            return Err(DistillError::InvalidLambda(*lambda));
        }
        _ => {}
    }

    let mut init_rng = stage_rng(seed, "student.init");
    let mut clf = Classifier::init(arch, num_classes, input_shape, &mut init_rng);
    let mut shuffle_rng = stage_rng(seed, "student.shuffle");
    let mut augment_rng = stage_rng(seed, "student.augment");

    let schedule = MultiStepLr::at_progress(cfg.base_lr, cfg.milestones.clone(), cfg.gamma);
    let mut opt = SgdMomentum::<f32>::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);

    let n = match source {
        TrainSource::Labeled(b) => b.len(),
        TrainSource::Distill(d) => d.len(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        opt.lr = schedule.lr(epoch, cfg.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, batch_loss) = match source {
                TrainSource::Labeled(b) => {
                    let sel = b.select(chunk);
                    let imgs = if policy.is_empty() {
                        sel.images
                    } else {
                        augment(&sel.images, policy, &mut augment_rng)
                            .map_err(|e| DistillError::SourceMismatch(e.to_string()))?
                    };
                    let onehot = one_hot(sel.labels.as_ref().unwrap(), num_classes);
                    (imgs, BatchLoss::Hard(onehot))
                }
                TrainSource::Distill(d) => {
                    let imgs = assemble_distill_batch(d, chunk, policy, &mut augment_rng)?;
                    let soft = probs_matrix(&d.soft_labels, chunk, num_classes);
                    match objective {
                        Objective::SoftCe => (imgs, BatchLoss::Soft(soft)),
                        Objective::StandardKd { lambda } => {
                            let hard: Vec<Label> = chunk
                                .iter()
                                .map(|&i| {
                                    d.hard_labels[i].ok_or_else(|| {
                                        DistillError::SourceMismatch(
                                            "hard labels on every example".into(),
                                        )
                                    })
                                })
                                .collect::<Result<_, _>>()?;
                            let probs: Vec<ProbVector> =
                                chunk.iter().map(|&i| d.soft_labels[i].clone()).collect();
                            let h = mean_entropy(&probs);
                            (imgs, BatchLoss::Mixed { soft, hard: one_hot(&hard, num_classes), lambda, teacher_entropy: h })
                        }
                        Objective::PlainCe => {
                            let hard: Vec<Label> = chunk
                                .iter()
                                .map(|&i| {
                                    d.hard_labels[i].ok_or_else(|| {
                                        DistillError::SourceMismatch(
                                            "hard labels on every example".into(),
                                        )
                                    })
                                })
                                .collect::<Result<_, _>>()?;
                            (imgs, BatchLoss::Hard(one_hot(&hard, num_classes)))
                        }
                    }
                }
            };

            let mut t = Tape::<f32>::new();
            let mut bind = ParamBind::new();
            let x = t.constant(images.into_dyn());
            let logits = clf.net.forward_train(&mut t, x, &mut bind);
            let loss = match &batch_loss {
                BatchLoss::Hard(onehot) => ce_loss_on_tape(&mut t, logits, onehot),
                BatchLoss::Soft(soft) => ce_loss_on_tape(&mut t, logits, soft),
                BatchLoss::Mixed { soft, hard, lambda, teacher_entropy } => {
                    let ce_hard = ce_loss_on_tape(&mut t, logits, hard);
                    let ce_soft = ce_loss_on_tape(&mut t, logits, soft);
                    let kl = t.add_scalar(ce_soft, -*teacher_entropy as f32);
                    let a = t.scale(ce_hard, (1.0 - lambda) as f32);
                    let b = t.scale(kl, *lambda as f32);
                    t.add(a, b)
                }
            };
            let lv = t.scalar(loss) as f64;
            if !lv.is_finite() {
                return Err(DistillError::Teacher(TeacherError::DivergedTraining {
                    step,
                    loss: lv,
                }));
            }
            loss_sum += lv;
            batches += 1;
            let grads = t.grad(loss, &bind.ids);
            let gv: Vec<ArrayD<f32>> = grads
                .iter()
                .map(|g| t.value(g.expect("student params reachable")).clone())
                .collect();
            opt.step(clf.net.params_mut(), &gv);
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

enum BatchLoss {
    Hard(Array2<f32>),
    Soft(Array2<f32>),
    Mixed { soft: Array2<f32>, hard: Array2<f32>, lambda: f64, teacher_entropy: f64 },
}

/// Gathers a mixed real/synthetic batch, augmenting only the real rows.
fn assemble_distill_batch(
    d: &DistillationSet,
    chunk: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Array4<f32>, DistillError> {
    let s = d.images.dim();
    let mut out = Array4::zeros((chunk.len(), s.1, s.2, s.3));
    for (row, &i) in chunk.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&d.images.index_axis(Axis(0), i));
    }
    if policy.is_empty() {
        return Ok(out);
    }
    let real_rows: Vec<usize> = chunk
        .iter()
        .enumerate()
        .filter(|(_, &i)| d.origins[i] == Origin::Real)
        .map(|(row, _)| row)
        .collect();
    if real_rows.is_empty() {
        return Ok(out);
    }
    let real_part = ImageBatch::unlabeled(out.clone()).select(&real_rows).images;
    let augmented = augment(&real_part, policy, rng)
        .map_err(|e| DistillError::SourceMismatch(e.to_string()))?;
    for (j, &row) in real_rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&augmented.index_axis(Axis(0), j));
    }
    Ok(out)
}

fn probs_matrix(probs: &[ProbVector], chunk: &[usize], k: usize) -> Array2<f32> {
    let mut out = Array2::zeros((chunk.len(), k));
    for (row, &i) in chunk.iter().enumerate() {
        for (j, &v) in probs[i].values().iter().enumerate() {
            out[[row, j]] = v as f32;
        }
    }
    out
}

/// Student probabilities on a batch, for the value-level loss helpers.
pub fn student_probs(clf: &Classifier, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
    let logits = clf.logits_eval(images)?;
    Ok(crate::teacher::softmax_rows(&logits))
}

/// Keep the tape losses honest against the value helpers.
#[doc(hidden)]
pub fn soft_ce_value_on_logits(logits: &Array2<f32>, targets: &[ProbVector]) -> f64 {
    let student = crate::teacher::softmax_rows(logits);
    kd_loss(&student, targets)
}

#[cfg(test)]
#[path = "distill_tests.rs"]
mod tests;
