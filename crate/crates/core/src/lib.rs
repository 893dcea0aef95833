pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod glancing;
pub mod loss;
pub mod metrics;
pub mod mtl;
pub mod nar;
pub mod nn;
pub mod optim;
pub mod params;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
