//! Evaluation: test accuracy, the Coverage diversity metric, and the
//! aggregated metrics document.

use ndarray::{Array4, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::Histogram;
use crate::rng::stage_rng;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("k_neighbors {k} must be smaller than the reference set ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("degenerate reference set: all points identical")]
    DegenerateReference,
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

/// Coverage configuration: k-th neighbor radius on Euclidean distances
/// over flattened pixels, with an optional reference subsample cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub k_neighbors: usize,
    /// Subsample cap on the reference set (keeps the O(n^2) feasible).
    pub max_reference: usize,
    /// Stream seed for the subsample.
    pub subsample_seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig { k_neighbors: 5, max_reference: 5000, subsample_seed: 0 }
    }
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(predictions: &[u16], labels: &[u16]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptySet("labels"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn sq_dist(a: &ArrayView1<'_, f64>, b: &ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Coverage: the fraction of reference points whose k-NN-radius
/// neighborhood (closed ball; ties count as covered) contains at least
/// one candidate point.
///
/// `reference` and `candidates` are row matrices of flattened images.
/// Distances are exact per-pair sums, not a factored form, so results
/// match a brute-force double loop bit for bit.
pub fn coverage_rows(
    reference: &ndarray::Array2<f64>,
    candidates: &ndarray::Array2<f64>,
    config: &CoverageConfig,
) -> Result<f64, MetricsError> {
    let n = reference.shape()[0];
    let m = candidates.shape()[0];
    if n == 0 {
        return Err(MetricsError::EmptySet("reference"));
    }
    if m == 0 {
        return Err(MetricsError::EmptySet("candidates"));
    }
    if reference.shape()[1] != candidates.shape()[1] {
        return Err(MetricsError::ShapeMismatch(format!(
            "reference dim {} vs candidate dim {}",
            reference.shape()[1],
            candidates.shape()[1]
        )));
    }

    // Subsample the reference deterministically when it exceeds the cap.
    let subsampled;
    let reference = if n > config.max_reference {
        let mut rng = stage_rng(config.subsample_seed, "coverage.subsample");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(config.max_reference);
        idx.sort_unstable();
        let mut sel = ndarray::Array2::zeros((config.max_reference, reference.shape()[1]));
        for (row, &i) in idx.iter().enumerate() {
            sel.row_mut(row).assign(&reference.row(i));
        }
        subsampled = sel;
        &subsampled
    } else {
        reference
    };
    let n = reference.shape()[0];
    if config.k_neighbors >= n {
        return Err(MetricsError::KTooLarge { k: config.k_neighbors, n });
    }

    // k-th nearest *other* reference point per row.
    use rayon::prelude::*;
    let radii: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = reference.row(i);
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&ri, &reference.row(j)))
                .collect();
            let k = config.k_neighbors - 1; // k-th smallest, 0-indexed
            dists.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
            dists[k]
        })
        .collect();

    if radii.iter().all(|&r| r == 0.0) {
        return Err(MetricsError::DegenerateReference);
    }

    let covered: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = reference.row(i);
            let r = radii[i];
            let hit = (0..m).any(|j| sq_dist(&ri, &candidates.row(j)) <= r);
            usize::from(hit)
        })
        .sum();
    Ok(covered as f64 / n as f64)
}

/// Coverage over image batches (flattened to f64 rows).
pub fn coverage(
    reference: &Array4<f32>,
    candidates: &Array4<f32>,
    config: &CoverageConfig,
) -> Result<f64, MetricsError> {
    coverage_rows(&flatten_images(reference), &flatten_images(candidates), config)
}

pub fn flatten_images(images: &Array4<f32>) -> ndarray::Array2<f64> {
    let b = images.shape()[0];
    let d: usize = images.shape()[1..].iter().product();
    let mut out = ndarray::Array2::zeros((b, d));
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        for (j, &v) in img.iter().enumerate() {
            out[[i, j]] = v as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------
// Metrics document
// ---------------------------------------------------------------------

/// Aggregated metrics for one run; the document the plot command and
/// the acceptance suite consume. Field layout is the published schema
/// (docs/metrics-schema.md).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema_version: u32,
    pub dataset: String,
    pub master_seed: u64,
    pub teacher_accuracy: f64,
    pub teacher_queries: TeacherQueries,
    pub thresholds: ThresholdsSection,
    pub gan: GanSection,
    pub students: Vec<StudentSection>,
    pub coverage: CoverageSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherQueries {
    pub per_stage: std::collections::BTreeMap<String, QueryCount>,
    pub total_calls: u64,
    pub total_images: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QueryCount {
    pub calls: u64,
    pub images: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdsSection {
    pub q: f64,
    pub tau: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    /// Per-class histograms of few-shot confidence scores.
    pub histograms: Vec<Histogram>,
    pub per_class_mean_scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanSection {
    pub epochs: usize,
    pub steps: usize,
    pub h_size_trace: Vec<usize>,
    pub final_loss_g: f64,
    pub final_loss_d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentSection {
    pub variant: String,
    pub final_accuracy: f64,
    pub accuracy_curve: Vec<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageSection {
    pub k_neighbors: usize,
    pub max_reference: usize,
    pub fewshot: f64,
    pub synthetic: f64,
}

/// Structural validation against the published schema: presence, types
/// (enforced by deserialization) and value ranges.
pub fn validate_metrics_doc(doc: &MetricsDoc) -> Result<(), MetricsError> {
    let bad = |msg: String| MetricsError::MissingArtifact(msg);
    if doc.schema_version != 1 {
        return Err(bad(format!("unknown schema_version {}", doc.schema_version)));
    }
    if !(0.0..=1.0).contains(&doc.teacher_accuracy) {
        return Err(bad("teacher_accuracy outside [0,1]".into()));
    }
    if doc.thresholds.tau.is_empty() {
        return Err(bad("thresholds.tau empty".into()));
    }
    if doc.thresholds.tau.len() != doc.thresholds.per_class_counts.len()
        || doc.thresholds.tau.len() != doc.thresholds.histograms.len()
    {
        return Err(bad("thresholds sections disagree on class count".into()));
    }
    if doc.gan.h_size_trace.len() != doc.gan.steps {
        return Err(bad("gan.h_size_trace length != steps".into()));
    }
    if doc.students.is_empty() {
        return Err(bad("no student sections".into()));
    }
    for s in &doc.students {
        if !(0.0..=1.0).contains(&s.final_accuracy) {
            return Err(bad(format!("student {} accuracy outside [0,1]", s.variant)));
        }
    }
    for c in [doc.coverage.fewshot, doc.coverage.synthetic] {
        if !(0.0..=1.0).contains(&c) {
            return Err(bad("coverage outside [0,1]".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rows(n: usize, d: usize, rng: &mut ChaCha12Rng) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    /// Brute-force double-loop coverage, the acceptance oracle.
    fn coverage_oracle(
        reference: &ndarray::Array2<f64>,
        candidates: &ndarray::Array2<f64>,
        k: usize,
    ) -> f64 {
        let n = reference.shape()[0];
        let m = candidates.shape()[0];
        let mut covered = 0usize;
        for i in 0..n {
            let mut dists = Vec::new();
            for j in 0..n {
                if i != j {
                    dists.push(sq_dist(&reference.row(i), &reference.row(j)));
                }
            }
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let radius = dists[k - 1];
            let mut hit = false;
            for j in 0..m {
                if sq_dist(&reference.row(i), &candidates.row(j)) <= radius {
                    hit = true;
                    break;
                }
            }
            covered += usize::from(hit);
        }
        covered as f64 / n as f64
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 3], &[1, 2, 3]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn coverage_of_itself_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let r = rows(40, 3, &mut rng);
        let cfg = CoverageConfig { k_neighbors: 3, max_reference: 1000, subsample_seed: 0 };
        assert_eq!(coverage_rows(&r, &r.clone(), &cfg).unwrap(), 1.0);
    }

    #[test]
    fn far_candidates_give_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let r = rows(30, 4, &mut rng);
        let far = rows(10, 4, &mut rng).mapv(|v| v + 1000.0);
        let cfg = CoverageConfig { k_neighbors: 2, max_reference: 1000, subsample_seed: 0 };
        assert_eq!(coverage_rows(&r, &far, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for trial in 0..30 {
            let n = rng.gen_range(10..60);
            let m = rng.gen_range(1..40);
            let d = rng.gen_range(1..6);
            let r = rows(n, d, &mut rng);
            let c = rows(m, d, &mut rng);
            for k in [1usize, 3, 5] {
                if k >= n {
                    continue;
                }
                let cfg = CoverageConfig { k_neighbors: k, max_reference: 10_000, subsample_seed: 0 };
                let got = coverage_rows(&r, &c, &cfg).unwrap();
                let want = coverage_oracle(&r, &c, k);
                assert_eq!(got, want, "trial {trial} k {k}");
            }
        }
    }

    #[test]
    fn permutation_and_translation_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let r = rows(25, 3, &mut rng);
        let c = rows(15, 3, &mut rng);
        let cfg = CoverageConfig { k_neighbors: 3, max_reference: 1000, subsample_seed: 0 };
        let base = coverage_rows(&r, &c, &cfg).unwrap();

        // permute rows of both sets
        let mut rp = r.clone();
        let mut perm: Vec<usize> = (0..25).collect();
        perm.shuffle(&mut rng);
        for (row, &i) in perm.iter().enumerate() {
            rp.row_mut(row).assign(&r.row(i));
        }
        let mut cp = c.clone();
        let mut permc: Vec<usize> = (0..15).collect();
        permc.shuffle(&mut rng);
        for (row, &i) in permc.iter().enumerate() {
            cp.row_mut(row).assign(&c.row(i));
        }
        assert_eq!(coverage_rows(&rp, &cp, &cfg).unwrap(), base);

        // rigid translation of both sets
        let rt = r.mapv(|v| v + 3.25);
        let ct = c.mapv(|v| v + 3.25);
        assert_eq!(coverage_rows(&rt, &ct, &cfg).unwrap(), base);
    }

    #[test]
    fn monotone_in_added_candidates() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let r = rows(30, 3, &mut rng);
        let c1 = rows(5, 3, &mut rng);
        let extra = rows(20, 3, &mut rng);
        let mut c2 = ndarray::Array2::zeros((25, 3));
        c2.slice_mut(ndarray::s![..5, ..]).assign(&c1);
        c2.slice_mut(ndarray::s![5.., ..]).assign(&extra);
        let cfg = CoverageConfig { k_neighbors: 2, max_reference: 1000, subsample_seed: 0 };
        let a = coverage_rows(&r, &c1, &cfg).unwrap();
        let b = coverage_rows(&r, &c2, &cfg).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn degenerate_reference_rejected() {
        let r = ndarray::Array2::from_elem((10, 3), 0.5);
        let c = ndarray::Array2::from_elem((5, 3), 0.5);
        let cfg = CoverageConfig { k_neighbors: 2, max_reference: 1000, subsample_seed: 0 };
        assert!(matches!(
            coverage_rows(&r, &c, &cfg),
            Err(MetricsError::DegenerateReference)
        ));
    }

    #[test]
    fn k_too_large_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let r = rows(5, 2, &mut rng);
        let c = rows(5, 2, &mut rng);
        let cfg = CoverageConfig { k_neighbors: 5, max_reference: 1000, subsample_seed: 0 };
        assert!(matches!(coverage_rows(&r, &c, &cfg), Err(MetricsError::KTooLarge { .. })));
    }

    #[test]
    fn subsample_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let r = rows(100, 3, &mut rng);
        let c = rows(10, 3, &mut rng);
        let cfg = CoverageConfig { k_neighbors: 3, max_reference: 40, subsample_seed: 9 };
        let a = coverage_rows(&r, &c, &cfg).unwrap();
        let b = coverage_rows(&r, &c, &cfg).unwrap();
        assert_eq!(a, b);
    }

    use rand::seq::SliceRandom;
}
