//! On-disk image batch format.
//!
//! Little-endian layout: magic `DBKD`, version u16, header
//! (num_images u32, channels u16, height u16, width u16, has_labels u8),
//! f32 pixels in image-major order, then u16 labels when present.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use super::{DataError, ImageBatch, Label};

const MAGIC: &[u8; 4] = b"DBKD";
const VERSION: u16 = 1;

pub fn save_batch<P: AsRef<Path>>(path: P, batch: &ImageBatch) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    let s = batch.images.shape();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(s[0] as u32).to_le_bytes())?;
    w.write_all(&(s[1] as u16).to_le_bytes())?;
    w.write_all(&(s[2] as u16).to_le_bytes())?;
    w.write_all(&(s[3] as u16).to_le_bytes())?;
    w.write_all(&[batch.labels.is_some() as u8])?;
    // Standard layout makes iteration order == image-major order.
    for &v in batch.images.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &batch.labels {
        for &l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_batch<P: AsRef<Path>>(path: P) -> Result<ImageBatch, DataError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let corrupt = |reason: &str| DataError::CorruptFile {
        path: display.clone(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(DataError::VersionMismatch { path: display });
    }
    let version = read_u16(&mut r).map_err(|_| corrupt("truncated version"))?;
    if version != VERSION {
        return Err(DataError::VersionMismatch { path: display });
    }
    let n = read_u32(&mut r).map_err(|_| corrupt("truncated header"))? as usize;
    let c = read_u16(&mut r).map_err(|_| corrupt("truncated header"))? as usize;
    let h = read_u16(&mut r).map_err(|_| corrupt("truncated header"))? as usize;
    let w = read_u16(&mut r).map_err(|_| corrupt("truncated header"))? as usize;
    let mut has_labels = [0u8; 1];
    r.read_exact(&mut has_labels).map_err(|_| corrupt("truncated header"))?;

    let count = n * c * h * w;
    let mut pixels = vec![0f32; count];
    {
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf).map_err(|_| corrupt("truncated pixel payload"))?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            pixels[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let images = Array4::from_shape_vec((n, c, h, w), pixels)
        .map_err(|e| corrupt(&e.to_string()))?;

    let labels = if has_labels[0] != 0 {
        let mut buf = vec![0u8; n * 2];
        r.read_exact(&mut buf).map_err(|_| corrupt("truncated labels"))?;
        Some(
            buf.chunks_exact(2)
                .map(|c| Label::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    Ok(ImageBatch { images, labels })
}

fn read_u16<R: Read>(r: &mut R) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
