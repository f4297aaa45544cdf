//! Soil moisture prediction with a hybrid of a process-based bucket model
//! and a Gaussian-process corrector learned from one-step-ahead residuals.

pub mod averaging;
pub mod calibration;
pub mod data;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod hybrid;
pub mod kernel;
pub mod linalg;
pub mod opt;
pub mod pbm;
pub mod seeds;
pub mod spgp;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
