//! Latent-conditioned signed-distance shape models.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod diffengine;
pub mod error;
pub mod experiment;
pub mod fitting;
pub mod geometry;
pub mod io;
mod mc_tables;
pub mod meshing;
pub mod metrics;
pub mod optim;
pub mod sampling;
pub mod sdfnet;
pub mod spatial;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

/// 3D position or direction.
pub type Vec3 = nalgebra::Vector3<f64>;
