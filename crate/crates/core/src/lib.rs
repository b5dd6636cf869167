//! Fourier-parameterized rotation and scale equivariant convolution.

pub mod autodiff;
pub mod bank;
pub mod basis;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
