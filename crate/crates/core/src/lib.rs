//! Self-supervised pretraining for 3D volumetric images via a cube-recovery
//! proxy task: volumes are partitioned into a grid of cubes, shuffled by a
//! permutation drawn from a precomputed bank, and individual cubes are flipped
//! 180 degrees; a shared-weight multi-branch 3D CNN learns to predict the
//! permutation index and the per-cube flips. The learned encoder transfers to
//! classification and dense segmentation targets.
//!
//! The crate is generic over the scalar type (`f32` for training, `f64` for
//! numeric verification); concrete aliases live at the crate root.

pub mod config;
pub mod cubeops;
pub mod error;
pub mod model;
pub mod nn;
pub mod permbank;
pub mod scalar;
pub mod trainer;
pub mod volumes;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Stable per-item seed derivation (splitmix64 finalizer). Used everywhere a
/// reproducible sub-stream is needed: per-volume generation, per-sample proxy
/// construction, per-epoch shuffles.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Concrete training-precision aliases.
pub type ProxyModel32 = model::ProxyModel<f32>;
pub type ClassifyModel32 = model::ClassifyModel<f32>;
pub type SegModel32 = model::SegModel<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
