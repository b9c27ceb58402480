//! Dataset loaders and the built-in registry.
//!
//! MNIST-like datasets come as IDX files (optionally gzipped) and are
//! resized to 32x32 at load time so every downstream stage — teacher,
//! WGAN and students — sees the canonical network shape. CIFAR-like
//! datasets come as the binary batch format and are already 32x32.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::bufread::GzDecoder;
use ndarray::Array4;

use super::augment::{resize_bilinear, AugmentationPolicy, Transform};
use super::{DataError, Dataset, DatasetSpec, ImageBatch, ImageShape, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// IDX image/label pairs (train-images-idx3-ubyte etc.), 1 channel,
    /// resized to 32x32 on load.
    MnistIdx,
    /// CIFAR binary batches (data_batch_N.bin / test_batch.bin), 3x32x32.
    CifarBin,
}

/// Loads a registered dataset from `root/<name>/`.
pub fn load_dataset(name: &str, root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join(name);
    match name {
        "mnist" | "fmnist" => {
            let (train, test) = load_idx_pair(&dir)?;
            let spec = DatasetSpec {
                name: name.to_string(),
                num_classes: 10,
                image_shape: ImageShape { c: 1, h: 32, w: 32 },
                train_count: train.len(),
                test_count: test.len(),
            };
            // The only transform for these datasets is the (deterministic)
            // resize, which already happened at load; classifier-time
            // augmentation is therefore empty.
            Ok(Dataset { spec, train, test, policy: AugmentationPolicy::none() })
        }
        "cifar10" => {
            let (train, test) = load_cifar_bin(&dir)?;
            let spec = DatasetSpec {
                name: name.to_string(),
                num_classes: 10,
                image_shape: ImageShape { c: 3, h: 32, w: 32 },
                train_count: train.len(),
                test_count: test.len(),
            };
            Ok(Dataset {
                spec,
                train,
                test,
                policy: AugmentationPolicy::new(vec![
                    Transform::ZeroPad(4),
                    Transform::RandomHorizontalFlip,
                    Transform::RandomCrop(32, 32),
                ]),
            })
        }
        "svhn" => {
            // SVHN ships in the CIFAR binary layout when converted; pads
            // and crops but no flip (digits are chiral).
            let (train, test) = load_cifar_bin(&dir)?;
            let spec = DatasetSpec {
                name: name.to_string(),
                num_classes: 10,
                image_shape: ImageShape { c: 3, h: 32, w: 32 },
                train_count: train.len(),
                test_count: test.len(),
            };
            Ok(Dataset {
                spec,
                train,
                test,
                policy: AugmentationPolicy::new(vec![
                    Transform::ZeroPad(4),
                    Transform::RandomCrop(32, 32),
                ]),
            })
        }
        other => Err(DataError::UnknownDataset(other.to_string())),
    }
}

fn load_idx_pair(dir: &Path) -> Result<(ImageBatch, ImageBatch), DataError> {
    let train_images = load_idx_images(&find_idx(dir, "train-images-idx3-ubyte")?)?;
    let train_labels = load_idx_labels(&find_idx(dir, "train-labels-idx1-ubyte")?)?;
    let test_images = load_idx_images(&find_idx(dir, "t10k-images-idx3-ubyte")?)?;
    let test_labels = load_idx_labels(&find_idx(dir, "t10k-labels-idx1-ubyte")?)?;
    let train = ImageBatch::labeled(resize_bilinear(&train_images, 32, 32), train_labels);
    let test = ImageBatch::labeled(resize_bilinear(&test_images, 32, 32), test_labels);
    Ok((train, test))
}

fn find_idx(dir: &Path, stem: &str) -> Result<std::path::PathBuf, DataError> {
    let raw = dir.join(stem);
    if raw.exists() {
        return Ok(raw);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(DataError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found in {}", stem, dir.display()),
    )))
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, DataError> {
    let f = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(f)))
    } else {
        Ok(Box::new(f))
    }
}

fn load_idx_images(path: &Path) -> Result<Array4<f32>, DataError> {
    let display = path.display().to_string();
    let corrupt = |reason: String| DataError::CorruptFile { path: display.clone(), reason };
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r).map_err(|_| corrupt("truncated magic".into()))?;
    if magic != 2051 {
        return Err(DataError::VersionMismatch { path: display });
    }
    let n = read_u32_be(&mut r).map_err(|_| corrupt("truncated header".into()))? as usize;
    let h = read_u32_be(&mut r).map_err(|_| corrupt("truncated header".into()))? as usize;
    let w = read_u32_be(&mut r).map_err(|_| corrupt("truncated header".into()))? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes)
        .map_err(|_| corrupt(format!("expected {} pixels", n * h * w)))?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Array4::from_shape_vec((n, 1, h, w), data).map_err(|e| corrupt(e.to_string()))
}

fn load_idx_labels(path: &Path) -> Result<Vec<Label>, DataError> {
    let display = path.display().to_string();
    let corrupt = |reason: String| DataError::CorruptFile { path: display.clone(), reason };
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r).map_err(|_| corrupt("truncated magic".into()))?;
    if magic != 2049 {
        return Err(DataError::VersionMismatch { path: display });
    }
    let n = read_u32_be(&mut r).map_err(|_| corrupt("truncated header".into()))? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|_| corrupt(format!("expected {n} labels")))?;
    Ok(bytes.into_iter().map(Label::from).collect())
}

fn load_cifar_bin(dir: &Path) -> Result<(ImageBatch, ImageBatch), DataError> {
    let mut train_files = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            train_files.push(p);
        }
    }
    if train_files.is_empty() {
        return Err(DataError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data_batch_N.bin in {}", dir.display()),
        )));
    }
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    for f in &train_files {
        read_cifar_file(f, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let train = ImageBatch::labeled(
        Array4::from_shape_vec((n, 3, 32, 32), images).map_err(|e| DataError::CorruptFile {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?,
        labels,
    );

    let mut images = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut images, &mut labels)?;
    let n = labels.len();
    let test = ImageBatch::labeled(
        Array4::from_shape_vec((n, 3, 32, 32), images).map_err(|e| DataError::CorruptFile {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?,
        labels,
    );
    Ok((train, test))
}

fn read_cifar_file(
    path: &Path,
    images: &mut Vec<f32>,
    labels: &mut Vec<Label>,
) -> Result<(), DataError> {
    const REC: usize = 1 + 3 * 32 * 32;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % REC != 0 {
        return Err(DataError::CorruptFile {
            path: path.display().to_string(),
            reason: format!("size {} is not a multiple of {REC}", bytes.len()),
        });
    }
    for rec in bytes.chunks_exact(REC) {
        labels.push(Label::from(rec[0]));
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

fn read_u32_be<R: Read + ?Sized>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}
