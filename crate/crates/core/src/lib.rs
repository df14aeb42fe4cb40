//! Unsupervised detection of safety-critical traffic scenes from trajectory
//! prediction residuals.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod iforest;
pub mod ingest;
pub mod io;
pub mod pipeline;
pub mod predictor;
pub mod proxies;
pub mod residual;
pub mod scene;
pub mod seed;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
