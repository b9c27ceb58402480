//! Confidence scores, pseudo-labels, adaptive per-class quantile
//! thresholds and high-confidence filtering.
//!
//! A probability vector's confidence score is its maximum entry; the
//! pseudo-label is the argmax (lowest index on ties). Per-class
//! thresholds are the q-quantile of the few-shot confidence scores of
//! that class, with linear interpolation between order statistics.
//! Everything here runs in f64 so quantile tests are exact regardless
//! of model precision.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),
    #[error("class {0} has no few-shot examples")]
    EmptyClass(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("quantile {0} outside [0,1]")]
    InvalidQuantile(f64),
    #[error("teacher error: {0}")]
    Teacher(String),
}

/// A length-K probability vector; the only thing a black-box teacher
/// ever returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

/// Non-negative entries summing to 1 within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-5;

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ConfidenceError> {
        if values.is_empty() {
            return Err(ConfidenceError::InvalidProbVector("empty vector".into()));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(ConfidenceError::InvalidProbVector(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(ConfidenceError::InvalidProbVector(format!(
                "sum {sum} deviates from 1 by more than {PROB_SUM_TOL}"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maximum entry of the teacher's probability vector.
pub fn confidence_score(p: &ProbVector) -> f64 {
    p.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Argmax class; ties break to the lowest index.
pub fn pseudo_label(p: &ProbVector) -> usize {
    let mut best = 0;
    let mut bv = p.values()[0];
    for (i, &v) in p.values().iter().enumerate().skip(1) {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

/// Score and pseudo-label of one image as judged by the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub score: f64,
    pub pseudo_label: usize,
}

impl ConfidenceRecord {
    pub fn from_probs(p: &ProbVector) -> Self {
        let label = pseudo_label(p);
        ConfidenceRecord { score: p.values()[label], pseudo_label: label }
    }
}

pub fn records_from_probs(probs: &[ProbVector]) -> Vec<ConfidenceRecord> {
    probs.iter().map(ConfidenceRecord::from_probs).collect()
}

/// Per-class confidence thresholds tau^k at quantile `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThresholds {
    pub q: f64,
    pub tau: Vec<f64>,
    /// How many few-shot scores backed each tau^k.
    pub per_class_counts: Vec<usize>,
}

impl AdaptiveThresholds {
    pub fn num_classes(&self) -> usize {
        self.tau.len()
    }
}

/// q-quantile by linear interpolation between order statistics
/// (position q*(n-1) in the sorted sample).
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Thresholds from per-class score groups (already grouped by the
/// few-shot ground-truth labels).
pub fn thresholds_from_scores(
    scores_by_class: &[Vec<f64>],
    q: f64,
) -> Result<AdaptiveThresholds, ConfidenceError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(ConfidenceError::InvalidQuantile(q));
    }
    let mut tau = Vec::with_capacity(scores_by_class.len());
    let mut counts = Vec::with_capacity(scores_by_class.len());
    for (k, scores) in scores_by_class.iter().enumerate() {
        if scores.is_empty() {
            return Err(ConfidenceError::EmptyClass(k));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        tau.push(quantile_linear(&sorted, q));
        counts.push(scores.len());
    }
    Ok(AdaptiveThresholds { q, tau, per_class_counts: counts })
}

/// Scores the few-shot set with the teacher and computes the per-class
/// q-quantile thresholds from the ground-truth class groups. Runs once,
/// before WGAN training; thresholds are never updated afterwards.
pub fn compute_thresholds<T: crate::teacher::BlackBoxTeacher + ?Sized>(
    teacher: &T,
    fewshot: &crate::data::FewShotSet,
    q: f64,
) -> Result<(AdaptiveThresholds, Vec<ConfidenceRecord>), ConfidenceError> {
    let num_classes = teacher.num_classes();
    let probs = teacher
        .predict_proba(&fewshot.images)
        .map_err(|e| ConfidenceError::Teacher(e.to_string()))?;
    let records = records_from_probs(&probs);
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let groups = group_scores_by_class(&scores, &fewshot.labels, num_classes)?;
    let thresholds = thresholds_from_scores(&groups, q)?;
    Ok((thresholds, records))
}

/// Groups scores by the ground-truth labels of the scored set.
pub fn group_scores_by_class(
    scores: &[f64],
    labels: &[u16],
    num_classes: usize,
) -> Result<Vec<Vec<f64>>, ConfidenceError> {
    if scores.len() != labels.len() {
        return Err(ConfidenceError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut groups = vec![Vec::new(); num_classes];
    for (&s, &l) in scores.iter().zip(labels) {
        groups[l as usize].push(s);
    }
    Ok(groups)
}

/// Images whose confidence meets their pseudo-class threshold, order
/// preserved, plus which rows were kept.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub images: Array4<f32>,
    pub records: Vec<ConfidenceRecord>,
    pub kept_indices: Vec<usize>,
}

pub fn filter_high_confidence(
    images: &Array4<f32>,
    records: &[ConfidenceRecord],
    thresholds: &AdaptiveThresholds,
) -> Result<Filtered, ConfidenceError> {
    if images.shape()[0] != records.len() {
        return Err(ConfidenceError::LengthMismatch(format!(
            "{} images vs {} records",
            images.shape()[0],
            records.len()
        )));
    }
    let kept: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            debug_assert!(r.pseudo_label < thresholds.tau.len());
            r.score >= thresholds.tau[r.pseudo_label]
        })
        .map(|(i, _)| i)
        .collect();
    let s = images.dim();
    let mut out = Array4::zeros((kept.len(), s.1, s.2, s.3));
    for (row, &i) in kept.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), row)
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    Ok(Filtered {
        images: out,
        records: kept.iter().map(|&i| records[i]).collect(),
        kept_indices: kept,
    })
}

/// Histogram of confidence scores over [1/K, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub fn confidence_histogram(scores: &[f64], num_classes: usize, bins: usize) -> Histogram {
    assert!(bins >= 1, "need at least one bin");
    let lo = 1.0 / num_classes as f64;
    let hi = 1.0;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &s in scores {
        let mut b = ((s - lo) / width).floor() as isize;
        if b < 0 {
            b = 0;
        }
        if b as usize >= bins {
            b = bins as isize - 1;
        }
        counts[b as usize] += 1;
    }
    Histogram { lo, hi, counts }
}

/// Serialized thresholds artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub q: f64,
    pub tau: Vec<f64>,
    pub counts: Vec<usize>,
    pub fewshot_hash: String,
}

impl ThresholdsFile {
    pub fn new(t: &AdaptiveThresholds, fewshot_hash: String) -> Self {
        ThresholdsFile {
            q: t.q,
            tau: t.tau.clone(),
            counts: t.per_class_counts.clone(),
            fewshot_hash,
        }
    }

    pub fn thresholds(&self) -> AdaptiveThresholds {
        AdaptiveThresholds {
            q: self.q,
            tau: self.tau.clone(),
            per_class_counts: self.counts.clone(),
        }
    }
}
