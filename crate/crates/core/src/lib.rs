pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod imaging;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod plot;
pub mod qc;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
