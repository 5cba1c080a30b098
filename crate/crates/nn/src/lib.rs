//! A deliberately small neural-network substrate: `f64` tensors, a
//! reverse-mode tape, MLP-Mixer and masked-transformer backbones, block-sparse
//! packing masks, and AdamW with a warmup/cosine schedule.

pub mod graph;
pub mod layers;
pub mod mask;
pub mod mixer;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

use std::path::Path;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Init, LayerNorm, Linear, Mlp};
pub use mask::{assign_positions, build_block_sparse_mask, packed_token_counts, BlockSparseMask, PositionIds};
pub use mixer::{Mixer, MixerConfig};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use params::{config_hash, CheckpointHeader, ParamId, ParamStore};
pub use tensor::Tensor;
pub use transformer::{sinusoidal_positions, Transformer, TransformerConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl NnError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        NnError::Io { path: path.display().to_string(), source }
    }
}
