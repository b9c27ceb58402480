//! Criterion benchmarks for the hot kernels: convolution passes, a full
//! gradient-penalty double backward, quantile thresholds and the
//! coverage metric.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use dbkd_core::confidence::thresholds_from_scores;
use dbkd_core::data::ImageShape;
use dbkd_core::gan::{gp_on_tape, DiscriminatorNet, GanModelConfig};
use dbkd_core::metrics::{coverage_rows, CoverageConfig};
use dbkd_core::nn::conv::{conv2d, conv2d_input_grad, conv2d_weight_grad, ConvGeom};
use dbkd_core::nn::layers::ParamBind;
use dbkd_core::nn::Tape;

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x: ArrayD<f32> =
        Array4::from_shape_fn((64, 8, 32, 32), |_| rng.gen_range(-1.0..1.0f32)).into_dyn();
    let w: ArrayD<f32> =
        Array4::from_shape_fn((16, 8, 3, 3), |_| rng.gen_range(-0.1..0.1f32)).into_dyn();
    let geom = ConvGeom::infer(x.shape(), w.shape(), 1, 1);
    let y = conv2d(&x, &w, &geom);

    c.bench_function("conv2d_s1_fwd_64x8x32", |b| b.iter(|| conv2d(&x, &w, &geom)));
    c.bench_function("conv2d_s1_input_grad", |b| {
        b.iter(|| conv2d_input_grad(&y, &w, &geom))
    });
    c.bench_function("conv2d_s1_weight_grad", |b| {
        b.iter(|| conv2d_weight_grad(&x, &y, &geom))
    });
}

fn bench_critic_gp(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let model = GanModelConfig {
        latent_dim: 32,
        base_maps: 16,
        image_shape: ImageShape { c: 1, h: 32, w: 32 },
    };
    let mut disc = DiscriminatorNet::init(&model, &mut rng);
    let batch: Array4<f32> =
        Array4::from_shape_fn((64, 1, 32, 32), |_| rng.gen_range(0.0..1.0f32));

    c.bench_function("gp_double_backward_b64", |b| {
        b.iter_batched(
            || batch.clone().into_dyn(),
            |x| {
                let mut tape = Tape::<f32>::new();
                let mut bind = ParamBind::new();
                let xi = tape.var(x);
                let pen = gp_on_tape(&mut tape, &mut disc, &mut bind, xi);
                tape.grad(pen, &bind.ids)
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_thresholds(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let groups: Vec<Vec<f64>> =
        (0..10).map(|_| (0..200).map(|_| rng.gen_range(0.1..1.0)).collect()).collect();
    c.bench_function("thresholds_10x200", |b| {
        b.iter(|| thresholds_from_scores(&groups, 0.1).unwrap())
    });
}

fn bench_coverage(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let reference = Array2::from_shape_fn((200, 64), |_| rng.gen_range(-1.0..1.0));
    let candidates = Array2::from_shape_fn((200, 64), |_| rng.gen_range(-1.0..1.0));
    let cfg = CoverageConfig { k_neighbors: 5, max_reference: 10_000, subsample_seed: 0 };
    c.bench_function("coverage_200x200x64", |b| {
        b.iter(|| coverage_rows(&reference, &candidates, &cfg).unwrap())
    });
}

criterion_group!(benches, bench_conv, bench_critic_gp, bench_thresholds, bench_coverage);
criterion_main!(benches);
