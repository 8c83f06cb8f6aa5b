//! Attention-routing capsule networks on a small reverse-mode autodiff engine.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation: dense tensors, the
//! computation graph, the capsule layer algebra, the full model with its
//! margin and reconstruction losses, RMSprop, image augmentation, and the
//! alignment statistics used to study transformation equivariance. File
//! formats, the trainer and the command-line interface live in the `arcaps`
//! crate.
//!
//! Tensor axes follow `(batch, width, height, capsule-dim, channel)` for
//! capsule tensors and `(batch, width, height, channel)` for plain feature
//! maps. Image loaders store the first spatial axis as image rows.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod align;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lab;
pub mod layers;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod transform;

pub use autodiff::{Graph, Mode, NodeId};
pub use error::{Error, Result};
pub use model::{ArCapsNet, ModelConfig};
pub use params::ParameterStore;
pub use real::Real;
pub use tensor::{Shape, Tensor};

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream identifiers (epoch, step, shard...) so that
/// independent streams never share a generator state.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
