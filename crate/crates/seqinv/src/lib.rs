//! Inverse estimation of static entity characteristics from driver-response
//! time series.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod forward;
pub mod infer;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod train;

pub use error::{Error, Result};
