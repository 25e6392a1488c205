//! Unsupervised exposure correction.
//!
//! The pipeline: synthesize multi-exposure training sequences from
//! well-exposed sRGB images through an emulated ISP ([`isp`]), train a tiny
//! encoder/predictor/corrector network with restoration, monopoly and
//! semantic losses ([`model`], [`train`], [`tensor`]), then correct
//! arbitrary-resolution images against a single reference image and measure
//! the results ([`metrics`]).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod isp;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageF32;
pub use model::{ExposureFeature, UecModel};
