//! Joint masked reconstruction of geospatially neighboring image pairs.
//!
//! The pipeline: pick an anchor image and one of its precomputed neighbors
//! ([`geo_index`]), random-resized-crop both while carrying their footprints
//! ([`augmentation`]), embed patch positions in the pair's shared frame
//! ([`relpos`]), mask both images at a ratio set by their overlap
//! ([`masking`]), reconstruct them jointly with a small masked autoencoder
//! ([`model`]), and weight the reconstruction error by what the neighbor
//! already reveals ([`visibility`]).

pub mod augmentation;
pub mod error;
pub mod exec;
pub mod geo_index;
pub mod imagery;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod relpos;
pub mod selftest;
pub mod synthetic;
pub mod trainer;
pub mod visibility;
pub mod visualize;

pub use error::{Error, Result};
pub use exec::Execution;
