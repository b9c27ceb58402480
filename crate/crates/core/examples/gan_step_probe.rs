// Scratch probe: wall time per WGAN outer step at candidate scales.
use std::time::Instant;

use dbkd_core::confidence::AdaptiveThresholds;
use dbkd_core::data::{FewShotSet, ImageShape};
use dbkd_core::gan::{train_gan, GanModelConfig, GanTrainConfig};
use dbkd_core::teacher::{BlackBoxTeacher, TeacherError};
use ndarray::Array4;

struct FlatTeacher;
impl BlackBoxTeacher for FlatTeacher {
    fn num_classes(&self) -> usize {
        10
    }
    fn input_shape(&self) -> ImageShape {
        ImageShape { c: 1, h: 32, w: 32 }
    }
    fn predict_proba(
        &self,
        images: &Array4<f32>,
    ) -> Result<Vec<dbkd_core::confidence::ProbVector>, TeacherError> {
        Ok((0..images.shape()[0])
            .map(|i| {
                let mut v = vec![0.05; 10];
                v[i % 10] = 0.55;
                dbkd_core::confidence::ProbVector::new(v).unwrap()
            })
            .collect())
    }
}

fn run(base: usize, latent: usize, batch: usize, n: usize, steps: usize) {
    let fewshot = FewShotSet {
        images: Array4::from_shape_fn((n, 1, 32, 32), |(b, _, i, j)| {
            ((b + i * j) % 17) as f32 / 17.0
        }),
        labels: (0..n).map(|i| (i % 10) as u16).collect(),
        source_indices: (0..n).collect(),
        seed: 0,
    };
    let thresholds = AdaptiveThresholds {
        q: 0.1,
        tau: vec![0.5; 10],
        per_class_counts: vec![n / 10; 10],
    };
    let model = GanModelConfig {
        latent_dim: latent,
        base_maps: base,
        image_shape: ImageShape { c: 1, h: 32, w: 32 },
    };
    let epochs = (steps * batch).div_ceil(n);
    let cfg = GanTrainConfig {
        learning_rate: 5e-5,
        batch_size: batch,
        n_critic: 5,
        gp_coefficient: 10.0,
        epochs,
        seed: 3,
    };
    let t0 = Instant::now();
    let out = train_gan(&fewshot, &FlatTeacher, &thresholds, &model, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "base {base:3} latent {latent:3} B {batch:3} N {n:5}: {} steps in {dt:6.1}s = {:5.2} s/step",
        out.log.len(),
        dt / out.log.len() as f64
    );
}

fn main() {
    run(16, 32, 250, 1000, 8);
    run(24, 48, 250, 1000, 8);
    run(32, 64, 250, 1000, 8);
}
