//! Minimal neural-network stack: eager tape autodiff, conv/pool kernels,
//! layer types, optimizers and a weights container format.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod serialize;
pub mod tape;

use rand::distributions::uniform::SampleUniform;
use rand::Rng;

/// Element type the stack is generic over. Training uses `f32`; the
/// finite-difference test harness and the quantile/score paths use `f64`.
pub trait Scalar: ndarray::NdFloat + SampleUniform {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

pub use layers::{BatchNorm2d, Conv2d, Layer, Linear, ParamBind, Sequential};
pub use optim::{MultiStepLr, RmsProp, SgdMomentum};
pub use tape::{Id, Tape};

#[cfg(test)]
mod tests;
