pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod networks;
pub mod objective;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
