//! Contrastive predictive coding on image patch grids with single- and
//! multi-directional masked context networks, plus the training harness used
//! to measure label efficiency.

#![allow(clippy::needless_range_loop)]

pub mod autoregressor;
pub mod cpc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod leakcheck;
pub mod par;
pub mod params;
pub mod patching;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
