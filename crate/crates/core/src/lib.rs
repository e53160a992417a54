//! Hierarchical periodic memory network for lifelong sequential user-response prediction.

pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod export;
pub mod hpmn;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
