//! Decoder-only transformers with hand-written backward passes.

mod checkpoint;
mod config;
mod decode;
pub mod kernels;
mod loss;
mod params;
mod real;
mod scoring;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Arch, ModelConfig, DEFAULT_CONTEXT_LEN};
pub use decode::{
    decode_row, generate_rows, next_field_distribution, truncate_context, FieldDistribution, Strategy, DEFAULT_CONTRASTIVE_ALPHA,
    DEFAULT_CONTRASTIVE_K,
};
pub use loss::{masked_nll, masked_softmax, support_for_position, Batch, FieldLosses, LossAndGrads};
pub use params::{ParamSet, Tensor};
pub use real::Real;
pub use scoring::{per_row_entropy, row_entropies_batch};
pub use transformer::{init_model, ForwardOutput, ModelState};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("token sequence of length {0} is not BOS followed by whole rows")]
    Misaligned(usize),
    #[error("non-finite parameter values")]
    NonFinite,
    #[error("model was trained against vocab {model:016x}, got {vocab:016x}")]
    VocabMismatch { model: u64, vocab: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
