//! Differentiable feature-field morphable models.
//!
//! A category-level template is an SDF network evaluated on a tetrahedral
//! grid and turned into a mesh by marching tetrahedra. Each instance deforms
//! the template vertices with a latent-conditioned affine field, and every
//! vertex carries a learned semantic feature. Training fits shape and
//! features to posed, masked, feature-annotated views; inference recovers
//! object rotation by maximizing rendered feature agreement.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod math;
pub mod model;
pub mod morph;
pub mod render;
pub mod tetra;
pub mod train;

pub use error::{Error, Result};
