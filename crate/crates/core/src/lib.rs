pub mod alloc;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod confidence;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fastrm;
pub mod params;
pub mod relevancy;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
