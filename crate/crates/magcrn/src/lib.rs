//! Meta-attentive graph convolutional recurrent network for multi-step
//! traffic forecasting.
//!
//! The model couples four pieces:
//!
//! * adaptive graph learning — an adjacency matrix derived from trainable
//!   node embeddings ([`agl`]);
//! * a GRU whose affine maps are node-adaptive graph convolutions ([`gcrn`]);
//! * a hypernetwork that turns the node-adaptive parameters into per-node,
//!   per-horizon convolutional filters applied to the final hidden state
//!   ([`nmpl`]);
//! * multihead cross-attention that re-weights those node-specific feature
//!   maps using the full hidden sequence ([`nawg`]).
//!
//! Everything runs on a self-contained reverse-mode tensor tape
//! ([`numerics`]) whose gradients are validated against central finite
//! differences. [`data`] covers ingestion, interpolation, normalization and
//! windowing; [`trainer`] covers L1/Adam training, early stopping and the
//! evaluation metrics; [`cli`] binds it all into reproducible commands.

pub mod agl;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gcrn;
pub mod model;
pub mod nawg;
pub mod nmpl;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod trainer;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use numerics::{Tape, Tensor};
