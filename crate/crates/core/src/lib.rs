//! Training and compression primitives for small convolutional classifiers.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. Everything here is pure computation over in-memory tensors:
//! file formats, dataset parsing and the command line live in the `nncomp`
//! companion crate.
//!
//! - [`tensor`], [`layers`], [`model`], [`loss`], [`optim`]: deterministic
//!   forward/backward passes and the Adam optimizer.
//! - [`zoo`]: the named teacher / assistant / student architectures.
//! - [`data`]: in-memory datasets, validation splits and shuffled batching.
//! - [`train`]: the supervised and distillation training loop.
//! - [`distill`], [`prune`], [`quant`]: the three compression techniques.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod distill;
pub mod gradcheck;
mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod prune;
pub mod quant;
mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use model::Model;
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
pub use zoo::{LayerSpec, ModelSpec};

/// Number of output classes for every supported dataset.
pub const NUM_CLASSES: usize = 10;

/// 64-bit FNV-1a. Used for seed derivation and model fingerprints, so it
/// must stay stable across releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
