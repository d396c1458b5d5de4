pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradflow;
pub mod masking;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
