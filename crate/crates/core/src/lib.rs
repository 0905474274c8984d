//! Fingerprint positioning research toolkit for sectorized cellular CSI.
//!
//! The crate covers the full experimental loop on one machine:
//!
//! - [`scene`] / [`channel`]: synthetic three-sector outdoor datasets from a
//!   geometric multipath model, with timing-advance offsets, AWGN,
//!   LoS/NLoS tagging, and sparse uneven labeling.
//! - [`transform`]: angle-delay preprocessing (2D-DFT), noise augmentation,
//!   and the interpolation variants behind pseudo-dataset construction.
//! - [`nn`] / [`trainer`]: a small deterministic neural engine and the
//!   training glue mapping angle-delay magnitudes to 2D coordinates.
//! - [`semi`]: dual-model consistency pseudo-labeling with a distance
//!   threshold, iterative refinement, and a single-model baseline.
//! - [`ensemble`]: diverse model pools with mean / weighted / median
//!   combination.
//! - [`sector`]: coordinate rotation between sectors and the shared
//!   backbone with three decoupled mapping heads.
//! - [`eval`]: Euclidean error, mean, CDF, and percentile reporting.
//! - [`experiment`] / [`pipeline`]: config files, validation, manifests,
//!   and end-to-end orchestration behind the CLI.

pub mod channel;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hashes;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod sector;
pub mod semi;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
