//! Situation-aware click-through-rate model.

pub mod bdm;
pub mod cfm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod flops;
pub mod model;
pub mod numerics;
pub mod params;
pub mod predictor;
pub mod sam;
pub mod sfe;
pub mod train;

pub use error::{Error, Result};
