//! Multiresolution tensor learning for basketball shot-profile analysis.
//!
//! The crate trains classifiers that predict whether a ball-handler shoots
//! within the next second given their court cell and the cells occupied by
//! nearby defenders. Training runs coarse-to-fine: a full-rank weight tensor
//! is learned on coarse grids, decomposed with CP-ALS, and the resulting
//! factors are refined at finer grids. Trained court factors are turned into
//! weighted heatmap profiles.
//!
//! Three model variants are supported:
//!
//! - `Base`: weights over (player, court cell, defender cell).
//! - `St`: an extra non-spatial mode (quarter or playstyle) with its own
//!   factor matrix in the low-rank model.
//! - `Dynamic`: one court copy per context value laid side by side in the
//!   court index, optionally tied together by a block-difference penalty.

pub mod cli;
pub mod cluster;
pub mod discretizer;
pub mod error;
pub mod ingest;
pub mod model;
pub mod profiler;
pub mod synth;
pub mod tensor_ops;
pub mod trainer;

pub use error::{Error, Result};
