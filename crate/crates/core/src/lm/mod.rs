//! Decoder-only language model used both as the frozen task model and as the
//! perplexity judge.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{
    decode, encode, load_checkpoint, model_from_bytes, save_checkpoint, Metadata, NamedTensors,
    PayloadKind, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{ModelConfig, BOS};
pub use model::{Block, BoundBlock, BoundModel, LanguageModel, ModelInput, Segment};
pub use train::{
    argmax, batch_sequence_nll, continue_training, generate, sequence_nll, train_lm, TrainOptions,
    TrainReport,
};

pub(crate) use train::sample_index;
