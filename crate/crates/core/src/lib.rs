pub mod cli;
pub mod covariance;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod mc;
pub mod moment_index;
pub mod noise;
pub mod optimize;
pub mod rng;
pub mod special;
pub mod svar;
pub mod var_model;

pub use error::{Error, Result};
