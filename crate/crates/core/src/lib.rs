//! CPRL laboratory: soft-rank channel activation, PNS min-max training,
//! gradient attacks and evaluation for small image-quality regressors.

pub mod analysis;
pub mod attacks;
pub mod commands;
pub mod config;
pub mod cprl;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod trainer;

pub use error::{CprlError, Result};
