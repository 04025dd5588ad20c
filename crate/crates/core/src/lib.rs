//! Deconfounding temporal autoencoder for treatment-effect estimation over
//! time, with a synthetic longitudinal simulator, marginal structural
//! outcome models and an experiment harness.

pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod neuralnet;
pub mod outcome;
pub mod dta;
pub mod simgen;

pub use data::TrajectoryDataset;
pub use error::{Error, Result};
