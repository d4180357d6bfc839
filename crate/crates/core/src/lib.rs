//! Iso-surface radiance manifolds: a scalar field sliced at increasing
//! levels, shaded from tri-plane features, composited front to back. The
//! crate covers rendering (exact and subsampled ray grids with caching),
//! a view-frustum detail volume with super-resolution, and gradient-descent
//! fitting of latent codes and detail values against target images.

pub mod blob;
pub mod config;
pub mod detail;
pub mod error;
pub mod field;
pub mod fit;
pub mod geometry;
pub mod intersect;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod parallel;
pub mod radiance;
pub mod render;

pub use error::{Error, Result};
