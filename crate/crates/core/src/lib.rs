//! Predictive visuo-motor network with two coupled multiple-timescale
//! pathways, trained by backpropagation through time, plus online intention
//! inference by error regression over a sliding window.

pub mod analysis;
mod binio;
pub mod bptt;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ers;
pub mod gesture;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::NetworkConfig;
pub use error::{Error, Result};
pub use network::{HiddenState, Layer, LayerState, Parameters, Weights};
