//! Mixture of low-rank experts (MoLRE) adapters over frozen features, with a
//! small volumetric multi-label training stack: synthetic CT-like data,
//! preprocessing and augmentation, attention pooling, focal loss, AdamW,
//! repeat-factor sampling, AUC metrics, checkpoints and a CLI.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use adapters::{count_molre_params, lora_forward, molre_forward, router_forward, LoraAdapter, MolreLayer, Router};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::{Mode, Model, ModelSpec};
pub use rng::RngStream;
pub use tensor::Tensor;
