// Scratch probe: is predict_proba bit-stable under concurrent callers?
use std::sync::Arc;

use dbkd_core::data::ImageShape;
use dbkd_core::rng::stage_rng;
use dbkd_core::teacher::{BlackBoxTeacher, Classifier, ClassifierArch, InProcessTeacher};
use ndarray::Array4;
use rand::Rng;

fn main() {
    let mut rng = stage_rng(5, "svc-test");
    let shape = ImageShape { c: 1, h: 32, w: 32 };
    let clf = Classifier::init(ClassifierArch::Lenet5Half, 10, shape, &mut rng);
    let teacher = Arc::new(InProcessTeacher::new(clf));
    let mut rng2 = stage_rng(7, "batch");
    let batch = Array4::from_shape_fn((2, 1, 32, 32), |_| rng2.gen_range(0.0..1.0f32));

    let expected = serde_json::to_string(&teacher.predict_proba(&batch).unwrap()).unwrap();
    // serial repeats
    for i in 0..20 {
        let got = serde_json::to_string(&teacher.predict_proba(&batch).unwrap()).unwrap();
        if got != expected {
            println!("SERIAL divergence at iter {i}");
            return;
        }
    }
    println!("serial: stable");
    // concurrent
    let mut joins = Vec::new();
    for t in 0..4 {
        let teacher = Arc::clone(&teacher);
        let batch = batch.clone();
        let expected = expected.clone();
        joins.push(std::thread::spawn(move || {
            let mut bad = 0;
            for _ in 0..50 {
                let got =
                    serde_json::to_string(&teacher.predict_proba(&batch).unwrap()).unwrap();
                if got != expected {
                    bad += 1;
                }
            }
            (t, bad)
        }));
    }
    for j in joins {
        let (t, bad) = j.join().unwrap();
        println!("thread {t}: {bad}/50 divergent");
    }
}
