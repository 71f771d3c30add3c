//! Compare-aggregate transformer for document-grounded dialogue.

pub mod beam;
pub mod checkpoint;
pub mod comparison;
pub mod config;
pub mod data;
pub mod encoder;
pub mod decoders;
pub mod error;
pub mod init;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod train;
pub mod transformer;
pub mod vocab;

#[cfg(test)]
mod testutil;

pub use config::{Ablation, DecoderKind, ModelConfig};
pub use error::{CatError, Result};
