//! Core algorithms for masked VQ-GAN anomaly detection on volumetric dental
//! label maps: phantom generation, preprocessing, a small autodiff engine,
//! the VQ-GAN model and its two-stage trainer, dual-reconstruction anomaly
//! detection and wound-region post-processing.
//!
//! The crate is `no_std` and needs only `alloc`; file formats and the
//! command-line front end live in the companion `onj-uad` crate.
#![no_std]

extern crate alloc;

pub mod anomaly;
pub mod diffnet;
pub mod error;
pub mod morphology;
pub mod phantom;
pub mod postproc;
pub mod preprocess;
pub mod trainer;
pub mod volume;
pub mod vqgan;

pub use error::{Error, Result};
pub use volume::{resample_nearest, Dims, VolumeGrid, VolumeKind, Voxels};
