//! Decomposition of a multi-object volumetric radiance field into
//! per-category sub-fields.
//!
//! A frozen density/color voxel field is split by a trainable category
//! field (a tempered softmax over `K` logits per point). Each category
//! renders with density `p^k σ`, so the sub-fields always recompose to
//! the original field. The category logits are trained through a
//! differentiable ray marcher from per-category image gradients, and the
//! resulting sub-densities are meshed with marching tetrahedra.

pub mod dissect;
pub mod error;
pub mod fields;
pub mod guidance;
pub mod image;
pub mod meshing;
pub mod pipeline;
pub mod renderer;
pub mod scenes;
pub mod toydiffusion;
pub mod vgrid;

pub use error::{Error, Result};

/// World-space vector.
pub type Vec3 = nalgebra::Vector3<f64>;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
