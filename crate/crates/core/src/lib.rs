//! Geometry cloaks: bounded image perturbations that steer a single-view
//! point-cloud reconstructor toward a chosen watermark pattern.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit instantiation used by the optimizer and the CLI.

pub mod cli;
pub mod cloak;
pub mod encoder;
pub mod error;
pub mod font;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod ndiff;
pub mod patterns;
pub mod render;
pub mod report;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = ndiff::Tensor<f64>;
pub type Tape64 = ndiff::Tape<f64>;
pub type Image64 = image::Image<f64>;
pub type PointCloud2D64 = geometry::PointCloud2D<f64>;
pub type PointCloud3D64 = geometry::PointCloud3D<f64>;
pub type Pattern64 = patterns::Pattern<f64>;
pub type ReferenceEncoder64 = encoder::ReferenceEncoder<f64>;
pub type Reconstructor64 = encoder::Reconstructor<f64>;
pub type CloakConfig64 = cloak::CloakConfig<f64>;
pub type CloakResult64 = cloak::CloakResult<f64>;

pub type Tensor32 = ndiff::Tensor<f32>;
pub type Tape32 = ndiff::Tape<f32>;
pub type Image32 = image::Image<f32>;
pub type PointCloud3D32 = geometry::PointCloud3D<f32>;
pub type ReferenceEncoder32 = encoder::ReferenceEncoder<f32>;
