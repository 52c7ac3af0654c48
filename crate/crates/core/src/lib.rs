pub mod apm;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flowalign;
pub mod model;
pub mod nn;
pub mod runtime;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod tpp;
pub mod train;

pub use error::{Error, Result};
