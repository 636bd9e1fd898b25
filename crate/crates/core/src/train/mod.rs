//! Model assembly, AdaDelta training with early stopping, parameter
//! counting, and model persistence.

mod adadelta;
mod config;
mod model;
mod persist;
mod trainer;

pub use adadelta::{AdaDelta, AdaDeltaState};
pub use config::{Architecture, MetricKind, ModelConfig, OutputLayer};
pub use model::{count_parameters, LossTerms, Model, Network, ParamCount, SentenceGraph, WORD_EMBEDDINGS};
pub use persist::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use trainer::{
    dev_score, train, train_epoch, train_seeds, EarlyStopping, EpochRecord, SeedRun, StopReason,
    TrainReport, Verdict,
};
