// Scratch probe: per-op timings at desk scale (B=250, base 32).
use std::time::Instant;

use dbkd_core::gan::{DiscriminatorNet, GanModelConfig, GeneratorNet};
use dbkd_core::nn::layers::ParamBind;
use dbkd_core::nn::Tape;
use dbkd_core::data::ImageShape;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn t<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{label:40} {:8.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let model = GanModelConfig {
        latent_dim: 64,
        base_maps: 32,
        image_shape: ImageShape { c: 1, h: 32, w: 32 },
    };
    let mut gen = GeneratorNet::init(&model, &mut rng);
    let mut disc = DiscriminatorNet::init(&model, &mut rng);
    let batch: Array4<f32> = Array4::from_shape_fn((250, 1, 32, 32), |_| rng.gen_range(0.0..1.0));
    let z: Array2<f32> = Array2::from_shape_fn((250, 64), |_| rng.gen_range(-1.0..1.0f32));

    t("G forward_train", 3, || {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();
        let zi = tape.constant(z.clone().into_dyn());
        let _ = gen.net.forward_train(&mut tape, zi, &mut bind);
    });

    t("D forward_train", 3, || {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();
        let xi = tape.constant(batch.clone().into_dyn());
        let _ = disc.net.forward_train(&mut tape, xi, &mut bind);
    });

    t("D fwd+bwd (params)", 3, || {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();
        let xi = tape.constant(batch.clone().into_dyn());
        let s = disc.net.forward_train(&mut tape, xi, &mut bind);
        let m = tape.mean_all(s);
        let _ = tape.grad(m, &bind.ids);
    });

    t("D gp (input grad + double bwd)", 3, || {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();
        let xi = tape.var(batch.clone().into_dyn());
        let pen = dbkd_core::gan::gp_on_tape(&mut tape, &mut disc, &mut bind, xi);
        let _ = tape.grad(pen, &bind.ids);
    });

    t("G fwd+bwd via D", 1, || {
        let mut tape = Tape::<f32>::new();
        let mut bind = ParamBind::new();
        let zi = tape.constant(z.clone().into_dyn());
        let fakes = gen.net.forward_train(&mut tape, zi, &mut bind);
        let mut bind_d = ParamBind::new();
        let s = disc.net.forward_train(&mut tape, fakes, &mut bind_d);
        let m = tape.mean_all(s);
        let lg = tape.neg(m);
        let _ = tape.grad(lg, &bind.ids);
    });
}
