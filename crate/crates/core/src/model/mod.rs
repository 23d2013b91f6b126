//! The predictor: token embedding, recurrent blocks with a routed value
//! projection and a routed feedforward, and a masked output head.

mod config;
mod graph;
mod infer;
mod params;

pub use config::ModelConfig;
pub use graph::{forward_terms, forward_train, param_vars, LossTerms, TrainBatch};
pub use infer::{forward_infer, InferModel, StreamContext};
pub use params::{init_params, initial_omega, merge_reparam, BlockParams, ModelParams, ReparamLinear};
