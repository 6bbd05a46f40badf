//! Synthetic arithmetic reasoning task: generator, tokenizer, trainer
//! and exact-match evaluator.

mod eval;
mod gen;
mod store;
mod train;
mod vocab;

pub use eval::{evaluate_exact_match, extract_final_answer, EvalOutcome, EvalRecord};
pub use gen::{build_corpus, gen_instance, Corpus, CorpusConfig, MathOp, TaskInstance};
pub use store::{read_instances, write_eval_records, write_instances};
pub use train::{
    decode_budget, encode_training_example, train_dense, EncodedExample, TrainConfig, TrainStats,
};
pub use vocab::{Vocab, SYMBOLS};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown symbol {symbol:?} at position {pos}")]
    UnknownSymbol { symbol: char, pos: usize },
    #[error("token id {token} outside the vocabulary")]
    UnknownToken { token: usize },
    #[error("task setup: {0}")]
    Setup(String),
    #[error(
        "training finished {epochs} epochs below the exact-match floor: reached {accuracy:.4}, need {floor:.4}"
    )]
    TrainingBelowFloor {
        accuracy: f64,
        floor: f64,
        epochs: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("record io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record format: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[cfg(test)]
mod tests;
