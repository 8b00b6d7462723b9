pub mod datasets;
pub mod genmodels;
pub mod harness;
pub mod indicators;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod nn;
pub mod theorylab;

pub use error::{Error, Result};
