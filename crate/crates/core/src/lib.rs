//! Channel-level adversarial intervention analysis for small convolutional networks.

pub mod attacks;
pub mod cache;
pub mod config;
pub mod data;
pub mod error;
pub mod intervention;
pub mod io;
pub mod network;
pub mod ops;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use network::{LayerSpec, NetworkSpec, SplitModel};
pub use tensor::Tensor;
