// Scratch probe: where the time goes inside a critic update.
use std::time::Instant;

use dbkd_core::data::ImageShape;
use dbkd_core::gan::{DiscriminatorNet, GanModelConfig};
use dbkd_core::nn::layers::ParamBind;
use dbkd_core::nn::Tape;
use ndarray::Array4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let model = GanModelConfig {
        latent_dim: 64,
        base_maps: 32,
        image_shape: ImageShape { c: 1, h: 32, w: 32 },
    };
    let mut disc = DiscriminatorNet::init(&model, &mut rng);
    let batch: Array4<f32> = Array4::from_shape_fn((250, 1, 32, 32), |_| rng.gen_range(0.0..1.0));

    for round in 0..3 {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();

        let t0 = Instant::now();
        let xi = tape.var(batch.clone().into_dyn());
        let score = disc.net.forward_train(&mut tape, xi, &mut bind);
        let t_fwd = t0.elapsed();

        let t0 = Instant::now();
        let ssum = tape.sum_all(score);
        let g = tape.grad(ssum, &[xi])[0].unwrap();
        let t_igrad = t0.elapsed();

        let t0 = Instant::now();
        let gsq = tape.square(g);
        let pernorm2 = tape.sum_axes(gsq, &[1, 2, 3]);
        let guarded = tape.add_scalar(pernorm2, 1e-24);
        let norm = tape.sqrt(guarded);
        let dm1 = tape.add_scalar(norm, -1.0);
        let sq = tape.square(dm1);
        let pen = tape.mean_all(sq);
        let t_chain = t0.elapsed();

        let t0 = Instant::now();
        let _grads = tape.grad(pen, &bind.ids);
        let t_double = t0.elapsed();
        println!(
            "round {round}: fwd {:6.1} ms | input-grad {:6.1} ms | chain {:6.1} ms | double {:6.1} ms | nodes {}",
            t_fwd.as_secs_f64() * 1e3,
            t_igrad.as_secs_f64() * 1e3,
            t_chain.as_secs_f64() * 1e3,
            t_double.as_secs_f64() * 1e3,
            tape.len(),
        );
    }
}
