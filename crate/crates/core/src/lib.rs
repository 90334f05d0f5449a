//! Quantized weight-sharing vision transformer supernets with
//! quantization-aware low-rank adapters.
//!
//! The crate covers the full desk-scale pipeline: a small autodiff engine
//! ([`graph`]), learnable fake quantization ([`quantize`]), adapter banks
//! ([`lora`]), the elastic backbone ([`supernet`]), BitOPs accounting
//! ([`cost`]), evolutionary search ([`evolve`]), training, checkpoints and
//! export ([`trainkit`]), plus synthetic data and experiment configs.

pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod evolve;
pub mod graph;
pub mod lora;
pub mod quantize;
pub mod supernet;
pub mod tensor;
pub mod trainkit;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use quantize::{BitWidth, LayerBits, QuantizerBank, QuantizerParams, TensorKind};
pub use supernet::{SearchSpace, SubnetConfig};
pub use tensor::Tensor;
