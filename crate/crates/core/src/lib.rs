//! Whole-body PET/CT lesion segmentation at desk scale.
//!
//! The crate covers the full training system: patient ingest and slice preprocessing
//! ([`ingest`]), whole-body slice sampling ([`sampler`]), a two-channel SE-residual
//! U-Net ([`model`], built on the CPU engine in [`nn`]), learned-weight Dice + Lovász +
//! BCE losses ([`losses`]), the training loop ([`trainer`]), volumetric evaluation
//! ([`metrics`]) and synthetic phantoms ([`phantom`]). [`cli`] wires them together.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
