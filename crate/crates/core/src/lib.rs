//! Animatable human avatars as skinned 3D Gaussians.
//!
//! A set of anisotropic Gaussians lives in a canonical body space. Each one
//! carries linear-blend skin weights against a small skeleton, so a per-frame
//! pose (Euler joint angles plus a root translation) deforms the whole set.
//! Appearance is view dependent: spherical-harmonic coefficients come either
//! from a multiresolution hash field over canonical position or from a UV
//! atlas, and a second hash field supplies a per-point corrective
//! displacement. A small time-conditioned field modulates brightness to
//! absorb baked-in lighting drift across a capture.
//!
//! Rendering projects the posed Gaussians to screen space and alpha-composites
//! them front to back in 16x16 pixel tiles. Every stage has a hand-written
//! backward pass, so the whole pipeline from pixel loss to canonical
//! parameters, field tables, and joint positions is differentiable and can be
//! optimized with Adam on the CPU.

pub mod error;
pub mod fields;
pub mod io;
pub mod math;
pub mod model;
pub mod rasterizer;
pub mod render;
pub mod shading;
pub mod skinning;
pub mod training;

#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
