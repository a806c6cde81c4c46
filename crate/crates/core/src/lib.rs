//! Hybrid quantum-classical nowcasting of 3D cloud volumes.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which the pipeline uses by default;
//! the `*32` variants are the single-precision equivalents.

pub mod binio;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dftu;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod quantum;
pub mod scalar;
pub mod tensor;
pub mod teqe;
pub mod topology;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use tensor::Var;

/// Environment variable that forces single-threaded execution.
pub const DETERMINISTIC_ENV: &str = "QENO_DETERMINISTIC";

/// Whether deterministic mode is on: the variable is set to anything but
/// `0` or the empty string.
pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Params = params::ModelParams<f64>;
pub type Model = pipeline::Model<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Params32 = params::ModelParams<f32>;
pub type Model32 = pipeline::Model<f32>;
