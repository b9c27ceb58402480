use ndarray::{Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::*;

fn toy_train(per_class: usize, num_classes: usize) -> ImageBatch {
    let n = per_class * num_classes;
    let images = Array4::from_shape_fn((n, 1, 4, 4), |(b, _, i, j)| {
        (b * 16 + i * 4 + j) as f32 / (n * 16) as f32
    });
    let labels: Vec<Label> = (0..n).map(|i| (i % num_classes) as Label).collect();
    ImageBatch::labeled(images, labels)
}

#[test]
fn few_shot_is_class_balanced_and_deterministic() {
    let train = toy_train(50, 10);
    let fs1 = build_few_shot(&train, 10, 100, 7).unwrap();
    let fs2 = build_few_shot(&train, 10, 100, 7).unwrap();
    assert_eq!(fs1.source_indices, fs2.source_indices);
    let mut counts = [0usize; 10];
    for &l in &fs1.labels {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c == 10));
    // sampling without replacement
    let mut uniq = fs1.source_indices.clone();
    uniq.dedup();
    assert_eq!(uniq.len(), fs1.source_indices.len());
}

#[test]
fn few_shot_minimal_budget_one_per_class() {
    let train = toy_train(3, 5);
    let fs = build_few_shot(&train, 5, 5, 1).unwrap();
    let mut counts = [0usize; 5];
    for &l in &fs.labels {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c == 1));
}

#[test]
fn few_shot_error_paths() {
    let train = toy_train(3, 4);
    match build_few_shot(&train, 4, 10, 0) {
        Err(DataError::NonDivisibleBudget { budget: 10, classes: 4 }) => {}
        other => panic!("expected NonDivisibleBudget, got {other:?}"),
    }
    match build_few_shot(&train, 4, 16, 0) {
        Err(DataError::InsufficientClassExamples { class, available: 3, needed: 4 }) => {
            assert!(class < 4)
        }
        other => panic!("expected InsufficientClassExamples, got {other:?}"),
    }
}

#[test]
fn different_seeds_differ() {
    let train = toy_train(50, 10);
    let a = build_few_shot(&train, 10, 100, 1).unwrap();
    let b = build_few_shot(&train, 10, 100, 2).unwrap();
    assert_ne!(a.source_indices, b.source_indices);
}

#[test]
fn empty_policy_is_identity() {
    let imgs = Array4::from_shape_fn((3, 1, 5, 5), |(b, _, i, j)| (b + i + j) as f32 / 12.0);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let out = augment(&imgs, &AugmentationPolicy::none(), &mut rng).unwrap();
    assert_eq!(out, imgs);
}

#[test]
fn resize_28_to_32_shape_and_range() {
    let imgs = Array4::from_shape_fn((2, 1, 28, 28), |(b, _, i, j)| {
        ((b * 28 * 28 + i * 28 + j) % 255) as f32 / 255.0
    });
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let policy = AugmentationPolicy::new(vec![Transform::Resize(32, 32)]);
    let out = augment(&imgs, &policy, &mut rng).unwrap();
    assert_eq!(out.shape(), &[2, 1, 32, 32]);
    assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn pad_crop_matches_index_arithmetic_oracle() {
    // With a fixed stream the crop offsets are known: replay the stream
    // to learn them, then verify content equals a shifted window of the
    // zero-padded original by direct index arithmetic.
    let imgs = Array4::from_shape_fn((4, 2, 32, 32), |(b, c, i, j)| {
        (b * 7919 + c * 131 + i * 31 + j) as f32 % 17.0 / 17.0
    });
    let policy = AugmentationPolicy::new(vec![Transform::ZeroPad(4), Transform::RandomCrop(32, 32)]);
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let out = augment(&imgs, &policy, &mut rng).unwrap();
    assert_eq!(out.shape(), imgs.shape());

    let mut replay = ChaCha12Rng::seed_from_u64(99);
    use rand::Rng;
    for b in 0..4 {
        let oy: usize = replay.gen_range(0..=8);
        let ox: usize = replay.gen_range(0..=8);
        for c in 0..2 {
            for i in 0..32 {
                for j in 0..32 {
                    let (pi, pj) = (i + oy, j + ox);
                    let expected = if (4..36).contains(&pi) && (4..36).contains(&pj) {
                        imgs[[b, c, pi - 4, pj - 4]]
                    } else {
                        0.0
                    };
                    assert_eq!(out[[b, c, i, j]], expected, "mismatch at {b},{c},{i},{j}");
                }
            }
        }
    }
}

#[test]
fn augment_shape_depends_on_policy_not_rng() {
    let imgs = Array4::from_shape_fn((2, 1, 28, 28), |_| 0.5f32);
    let policy = AugmentationPolicy::new(vec![
        Transform::Resize(32, 32),
        Transform::ZeroPad(2),
        Transform::RandomCrop(32, 32),
        Transform::RandomHorizontalFlip,
    ]);
    let (h, w) = policy.output_hw((28, 28));
    for seed in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let out = augment(&imgs, &policy, &mut rng).unwrap();
        assert_eq!(out.shape(), &[2, 1, h, w]);
    }
}

#[test]
fn oversize_crop_is_shape_mismatch() {
    let imgs = Array4::<f32>::zeros((1, 1, 8, 8));
    let policy = AugmentationPolicy::new(vec![Transform::RandomCrop(9, 9)]);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    assert!(matches!(
        augment(&imgs, &policy, &mut rng),
        Err(DataError::ShapeMismatch(_))
    ));
}

#[test]
fn batch_file_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.dbkb");
    let images = Array4::from_shape_fn((7, 3, 5, 4), |(b, c, i, j)| {
        ((b * 60 + c * 20 + i * 4 + j) as f32).sin()
    });
    let batch = ImageBatch::labeled(images, (0..7).map(|i| (i % 3) as Label).collect());
    save_batch(&path, &batch).unwrap();
    let loaded = load_batch(&path).unwrap();
    assert_eq!(loaded.images, batch.images);
    assert_eq!(loaded.labels, batch.labels);
}

#[test]
fn batch_file_unlabeled_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.dbkb");
    let batch = ImageBatch::unlabeled(Array4::from_elem((2, 1, 3, 3), 0.25f32));
    save_batch(&path, &batch).unwrap();
    let loaded = load_batch(&path).unwrap();
    assert_eq!(loaded.images, batch.images);
    assert!(loaded.labels.is_none());
}

#[test]
fn wrong_magic_is_version_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.dbkb");
    std::fs::write(&path, b"NOPE\x01\x00garbage").unwrap();
    assert!(matches!(load_batch(&path), Err(DataError::VersionMismatch { .. })));
}

#[test]
fn truncated_file_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.dbkb");
    let batch = ImageBatch::unlabeled(Array4::from_elem((4, 1, 8, 8), 0.5f32));
    save_batch(&path, &batch).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_batch(&path), Err(DataError::CorruptFile { .. })));
}

#[test]
fn fewshot_round_trip_preserves_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fs.dbkb");
    let train = toy_train(30, 10);
    let fs = build_few_shot(&train, 10, 200, 3).unwrap();
    save_batch(&path, &fs.as_batch()).unwrap();
    let loaded = load_batch(&path).unwrap();
    let mut counts = [0usize; 10];
    for &l in loaded.labels.as_ref().unwrap() {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c == 20));
}

#[test]
fn select_keeps_rows_aligned() {
    let train = toy_train(4, 3);
    let sel = train.select(&[5, 0, 7]);
    assert_eq!(sel.len(), 3);
    assert_eq!(sel.labels.as_ref().unwrap()[0], train.labels.as_ref().unwrap()[5]);
    assert_eq!(
        sel.images.index_axis(Axis(0), 1),
        train.images.index_axis(Axis(0), 0)
    );
}
