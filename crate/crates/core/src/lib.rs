//! Desk-scale pipeline for augmenting pose-estimation training data with an
//! appearance-conditioned radiance field.
//!
//! The stages, in pipeline order:
//!
//! - [`scene_synth`] renders a procedural target under per-image lighting.
//! - [`trainer`] fits a [`field::RadianceField`] with per-image appearance
//!   embeddings to those images.
//! - [`augment`] renders new views with interpolated or extrapolated
//!   embeddings and texture-randomized color networks.
//! - [`probe`] trains a small pose regressor with and without the augmented
//!   images and compares them with [`metrics`].
//!
//! All sets are exchanged as [`dataset_io::DatasetManifest`] files.

pub mod augment;
pub mod dataset_io;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod probe;
pub mod renderer;
pub mod rng;
pub mod scene_synth;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
