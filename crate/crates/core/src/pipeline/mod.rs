//! The transformation pipeline: configuration, parameter registry, forward
//! pass, losses, training and evaluation.

mod config;
pub mod forward;
mod eval;
mod model;
mod train;

pub use config::{Ablation, LossKind, ModelConfig, Pooling};
pub use eval::{eval_episode, evaluate, generalize, MetricReport, ModeMetrics};
pub use forward::{
    decode_mode, encode_mode, episode_loss, episode_loss_with, forward_episode, link_inputs, link_loss, link_scores,
    pool_embeddings, predict_remaining, total_loss, update_topology, EpisodePlan, LinkInputs, Prediction,
};
pub use model::{trainable_param_count, Bound, Model, Param, ParamGroup};
pub use train::{train, HistoryRow, OptimizerKind, TrainConfig, TrainOutcome};

use crate::data::DataError;
use crate::graph::GraphError;
use crate::hypernet::CheckpointError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
