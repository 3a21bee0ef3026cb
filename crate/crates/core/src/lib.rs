//! Audio-visual highlight detection with a dual-pathway audio encoder.
//!
//! Modules follow the data path: [`audio`] turns waveforms into log-mel
//! spectrograms, [`model`] scores per-second segments, [`metrics`] compares
//! scores to ground truth, and [`train`] drives optimization and ablations.
//! [`dft`], [`checkpoint`], [`manifest`] and [`synth`] handle files and data.

pub mod audio;
pub mod checkpoint;
pub mod dft;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
