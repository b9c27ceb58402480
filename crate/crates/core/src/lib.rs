//! Black-box few-shot knowledge distillation toolkit.
//!
//! The pipeline trains a WGAN-GP whose discriminator sees, as "real"
//! data, the union of a small labeled image set and the synthetic images
//! the (black-box) teacher classifies with high confidence under
//! per-class quantile thresholds. The trained generator then produces a
//! class-balanced synthetic set which, together with the real images and
//! the teacher's soft labels, trains a compact student.

pub mod confidence;
pub mod data;
pub mod distill;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod service;
pub mod teacher;

pub use nn::Scalar;

// Tape ops allocate large transient buffers every step; the default
// allocator's mmap/munmap churn dominates at that pattern.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
