use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::tensor::TensorError;
use crate::transformer::ConfigError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("a model needs at least one decoder")]
    NoDecoders,
    #[error("decoder `{0}` already exists")]
    DuplicateTask(String),
    #[error("unknown decoder `{0}`")]
    UnknownTask(String),
    #[error("invalid decoder name `{0}`")]
    InvalidTaskName(String),
    #[error("decoder `{task}` is not a {expected} decoder")]
    WrongKind { task: String, expected: &'static str },
    #[error("decoder `{task}` does not handle {what}")]
    UnsupportedTask { task: String, what: String },
    #[error("classification decoder needs at least one label")]
    NoLabels,
    #[error("parameter `{0}` is shared by two components")]
    NameCollision(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("input of {len} tokens exceeds max_seq_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("training mode {mode} cannot {action}")]
    Mode { mode: String, action: String },
    #[error("the corpus yields no training examples")]
    EmptyCorpus,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
