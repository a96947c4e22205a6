//! Federated cross-domain sequential recommendation over product-quantized
//! item codes.
mod binio;
pub mod checkpoint;
pub mod code_model;
pub mod coder;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod privacy;
pub mod prompts;
pub mod server;
pub mod wire;

pub use error::{Error, ErrorKind, Result};
