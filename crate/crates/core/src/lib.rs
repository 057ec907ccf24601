pub mod cli;
pub mod decay;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod matrix_analytic;
pub mod models;
pub mod optimize;
pub mod oracle;
pub mod spectral;

pub use error::{Error, Result};
