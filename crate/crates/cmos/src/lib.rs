//! Cardiac motion scoring from cine MR sequences.
//!
//! `cmos` rates the wall motion of each left-ventricle segment on the
//! standard 4-point scale (normal, hypokinetic, akinetic, dyskinetic) from
//! short-axis cine sequences. The pipeline: polar segment resampling of the
//! 16 AHA segments, a temporal convolution whose kernel is interpolated to
//! the sequence length, four convolution blocks with optional segment- or
//! subject-level non-local attention, and a subject-batched training and
//! cross-validated evaluation harness.
//!
//! Everything runs on a small self-contained tensor engine with reverse-mode
//! gradients, verified end to end by finite differences. See the guide under
//! `book/` for worked chapters; its code snippets compile as doc-tests.

pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};

/// Stable seed derivation so each consumer of a run seed gets an
/// independent, reproducible stream. SplitMix64 over the seed and an
/// FNV-1a hash of the purpose tag.
pub(crate) fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
