// Scratch probe: LeNet training throughput on MNIST (temporary).
use std::time::Instant;

use dbkd_core::data::{load_dataset, ImageBatch};
use dbkd_core::teacher::{train_classifier, ClassifierArch, ClassifierTrainConfig};

fn main() {
    let root = std::path::Path::new("/root/data");
    let t0 = Instant::now();
    let ds = load_dataset("mnist", root).unwrap();
    println!("load: {:.1?} train={} test={}", t0.elapsed(), ds.train.len(), ds.test.len());

    // 1 epoch on a 10k subset to extrapolate
    let sub = ds.train.select(&(0..60000).collect::<Vec<_>>());
    let sub = ImageBatch { images: sub.images, labels: sub.labels };
    let test_sub = ds.test.select(&(0..10000).collect::<Vec<_>>());
    let cfg = ClassifierTrainConfig::fixed_lr(3, 128);
    let t0 = Instant::now();
    let (_clf, log) = train_classifier(
        ClassifierArch::Lenet5,
        10,
        ds.spec.image_shape,
        &sub,
        &test_sub,
        &ds.policy,
        &cfg,
        42,
    )
    .unwrap();
    for l in &log { println!("epoch {} loss {:.4} acc {:.4}", l.epoch, l.mean_loss, l.test_accuracy); }
    println!("3 epochs / 60k: {:.1?}", t0.elapsed());
}
