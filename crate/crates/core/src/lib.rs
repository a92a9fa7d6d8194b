pub mod affinity;
pub mod drift_field;
pub mod error;

pub use error::{DriftError, Result};
pub mod transport;
pub mod mgda;
pub mod feature_bank;
pub mod descriptor_autodiff;
pub mod phantom;
pub mod generator;
pub mod spectrum;
pub mod trainer;
pub mod io;
pub mod config;
