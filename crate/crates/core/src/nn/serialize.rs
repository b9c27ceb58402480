//! Weights container: the stack's native checkpoint format.
//!
//! Layout (all little-endian): magic `DBKW`, version u16, entry count
//! u32, then per entry: name length u16 + UTF-8 name, ndim u8, dims as
//! u32s, and the f32 payload. Bytes are deterministic for a given
//! network state, so a SHA-256 of the file doubles as the model
//! fingerprint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Scalar;

const MAGIC: &[u8; 4] = b"DBKW";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic or version {0})")]
    VersionMismatch(u16),
    #[error("corrupt weights file: {0}")]
    Corrupt(String),
    #[error("missing array {0}")]
    MissingArray(String),
    #[error("shape mismatch for {name}: file {file:?}, model {model:?}")]
    ShapeMismatch { name: String, file: Vec<usize>, model: Vec<usize> },
}

pub fn save_named<F: Scalar, P: AsRef<Path>>(
    path: P,
    arrays: &[(String, &ArrayD<F>)],
) -> Result<(), WeightsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, arr) in arrays {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[arr.ndim() as u8])?;
        for &d in arr.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in arr.iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_named<F: Scalar, P: AsRef<Path>>(
    path: P,
) -> Result<Vec<(String, ArrayD<F>)>, WeightsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(WeightsError::VersionMismatch(0));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(WeightsError::VersionMismatch(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| WeightsError::Corrupt("non-utf8 array name".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| WeightsError::Corrupt(format!("truncated payload for {name}")))?;
            data.push(F::from_f64(f32::from_le_bytes(buf) as f64));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| WeightsError::Corrupt(e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

/// Load saved arrays into an existing network's named slots.
pub fn restore_into<F: Scalar>(
    saved: Vec<(String, ArrayD<F>)>,
    targets: Vec<(String, &mut ArrayD<F>)>,
) -> Result<(), WeightsError> {
    let mut map: std::collections::HashMap<String, ArrayD<F>> = saved.into_iter().collect();
    for (name, slot) in targets {
        let arr = map
            .remove(&name)
            .ok_or_else(|| WeightsError::MissingArray(name.clone()))?;
        if arr.shape() != slot.shape() {
            return Err(WeightsError::ShapeMismatch {
                name,
                file: arr.shape().to_vec(),
                model: slot.shape().to_vec(),
            });
        }
        *slot = arr;
    }
    Ok(())
}

/// SHA-256 of a file, hex-encoded.
pub fn file_sha256<P: AsRef<Path>>(path: P) -> std::io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_digest(&hasher.finalize()))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, WeightsError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, WeightsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
