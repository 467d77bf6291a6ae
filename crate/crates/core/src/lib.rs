//! Whole-heart CT segmentation from contrast-suppressed training data.
//!
//! Library layout follows the processing chain: [`volume_io`] (images, label maps,
//! preprocessing), [`phantom`] (synthetic aligned CCTA/VNC/NCCT cohorts),
//! [`network`] (the encoder/residual/decoder CNN with hand-written gradients),
//! [`training`] (patch sampling, schedule, folds, checkpoint selection),
//! [`inference`] (tiling, ensembling, component cleanup), [`metrics`],
//! [`stats`] and [`experiment`] (end-to-end cross-validation runs and reports).

pub mod cohort;
pub mod error;
pub mod experiment;
mod fsutil;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod stats;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
