//! Global-and-local (GALA) attention for small convolutional networks, supervised
//! with human importance maps, plus the data, stimulus and evaluation tooling
//! around it.

pub mod backbone;
pub mod checkpoint;
pub mod clickme;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gala;
pub mod imageops;
pub mod metrics;
mod init;
pub mod stimulus;
pub mod supervision;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
