//! Batch augmentation: resize, zero-pad, random crop, random flip.
//!
//! Random transforms draw from the caller's stream only, per image in
//! index order, so a given (policy, seed) pair is reproducible. Output
//! shape depends on the policy alone.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use super::DataError;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Transform {
    /// Bilinear resize to (h, w).
    Resize(usize, usize),
    /// Zero padding, px per side.
    ZeroPad(usize),
    /// Random crop to (h, w), offsets uniform over the valid range.
    RandomCrop(usize, usize),
    /// Horizontal mirror with probability 0.5.
    RandomHorizontalFlip,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationPolicy {
    pub transforms: Vec<Transform>,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy { transforms: Vec::new() }
    }

    pub fn new(transforms: Vec<Transform>) -> Self {
        AugmentationPolicy { transforms }
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Output (h, w) for a given input size.
    pub fn output_hw(&self, mut hw: (usize, usize)) -> (usize, usize) {
        for t in &self.transforms {
            hw = match *t {
                Transform::Resize(h, w) => (h, w),
                Transform::ZeroPad(p) => (hw.0 + 2 * p, hw.1 + 2 * p),
                Transform::RandomCrop(h, w) => (h, w),
                Transform::RandomHorizontalFlip => hw,
            };
        }
        hw
    }
}

/// Applies `policy` to every image of `images`, consuming randomness
/// from `rng` only.
pub fn augment<R: Rng + ?Sized>(
    images: &Array4<f32>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Array4<f32>, DataError> {
    let mut cur = images.clone();
    for t in &policy.transforms {
        cur = match *t {
            Transform::Resize(h, w) => resize_bilinear(&cur, h, w),
            Transform::ZeroPad(p) => zero_pad(&cur, p),
            Transform::RandomCrop(h, w) => random_crop(&cur, h, w, rng)?,
            Transform::RandomHorizontalFlip => random_flip(&cur, rng),
        };
    }
    Ok(cur)
}

/// Bilinear resize with half-pixel centers (the common framework
/// convention, align_corners = false).
pub fn resize_bilinear(images: &Array4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (b, c, h, w) = images.dim();
    if (h, w) == (oh, ow) {
        return images.clone();
    }
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let src = images.index_axis(Axis(0), bi);
            let src = src.index_axis(Axis(0), ci);
            for oy in 0..oh {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..ow {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = fx - x0 as f32;
                    let v = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                        + src[[y0, x1]] * (1.0 - wy) * wx
                        + src[[y1, x0]] * wy * (1.0 - wx)
                        + src[[y1, x1]] * wy * wx;
                    out[[bi, ci, oy, ox]] = v;
                }
            }
        }
    }
    out
}

fn zero_pad(images: &Array4<f32>, p: usize) -> Array4<f32> {
    let (b, c, h, w) = images.dim();
    let mut out = Array4::zeros((b, c, h + 2 * p, w + 2 * p));
    out.slice_mut(ndarray::s![.., .., p..p + h, p..p + w]).assign(images);
    out
}

fn random_crop<R: Rng + ?Sized>(
    images: &Array4<f32>,
    ch: usize,
    cw: usize,
    rng: &mut R,
) -> Result<Array4<f32>, DataError> {
    let (b, c, h, w) = images.dim();
    if ch > h || cw > w {
        return Err(DataError::ShapeMismatch(format!(
            "crop {ch}x{cw} larger than input {h}x{w}"
        )));
    }
    let mut out = Array4::zeros((b, c, ch, cw));
    for bi in 0..b {
        let oy = rng.gen_range(0..=h - ch);
        let ox = rng.gen_range(0..=w - cw);
        out.index_axis_mut(Axis(0), bi)
            .assign(&images.slice(ndarray::s![bi, .., oy..oy + ch, ox..ox + cw]));
    }
    Ok(out)
}

fn random_flip<R: Rng + ?Sized>(images: &Array4<f32>, rng: &mut R) -> Array4<f32> {
    let mut out = images.clone();
    let (b, _c, _h, w) = images.dim();
    for bi in 0..b {
        if rng.gen_bool(0.5) {
            let mut img: Array3<f32> = images.index_axis(Axis(0), bi).to_owned();
            img.invert_axis(Axis(2));
            out.index_axis_mut(Axis(0), bi).assign(&img);
        }
    }
    let _ = w;
    out
}
