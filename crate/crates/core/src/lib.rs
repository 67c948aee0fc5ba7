//! Multi-task, multi-link relay semantic communication over simulated wireless links.
//!
//! A source node sends learned JSCC symbols to a destination both directly and
//! through a relay. The relay reconstructs and classifies the image, then
//! re-encodes it conditioned on the predicted class. The destination fuses
//! both links to classify and decodes the relayed signal with its predicted class.

pub mod channel;
pub mod checkpoint;
pub mod class_codec;
pub mod classifier;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod selftest;
pub mod sweep;
pub mod train;

pub use config::{derive_dims, load_config, CodecDims, ExperimentConfig};
pub use error::{Error, Result};
pub use pipeline::{ForwardOutputs, ModuleGroup, RelaySystem, Scheme};
pub use sweep::{ResultRow, ResultsTable, SweepAxis};
