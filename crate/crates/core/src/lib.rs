//! Top-any gated mixture-of-experts layers with trainable per-expert
//! thresholds, a straight-through backward pass, and a training process that
//! adds and removes experts from routing records.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the tests use throughout.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod error;
pub mod harness;
pub mod losses;
pub mod moe;
pub mod numerics;
pub mod optim;
pub mod router;
pub mod scalar;
pub mod telemetry;

pub use adaptive::{adapt, AdaptConfig, AdaptReport, InitStrategy, RoutingRecord};
pub use error::{Error, Result};
pub use harness::{
    evaluate, gen_task, gen_task_with, run_baseline, sweep, train_loop, Model, RouterKind, RunConfig, RunResult,
    SyntheticTask, TaskConfig, TrainConfig,
};
pub use losses::{diversity_simplicity_loss, AuxLossPlugin, AuxLossReport, PluginSpec};
pub use moe::{count_activated_params, moe_backward, moe_forward, moe_forward_weighted, Combine, ExpertMlp, Mode, MoeLayer};
pub use numerics::{Matrix, Param};
pub use router::{route_eval, route_top_any, GatingDecision, Mask, RouterParams};
pub use scalar::Scalar;
pub use telemetry::{activation_frequency, expert_similarity_matrix, gate_threshold_dump, topk_frequency, MetricsLog};

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type RouterParamsF64 = RouterParams<f64>;
pub type ExpertMlpF64 = ExpertMlp<f64>;
pub type MoeLayerF64 = MoeLayer<f64>;
pub type MoeLayerF32 = MoeLayer<f32>;
pub type ModelF64 = Model<f64>;
pub type SyntheticTaskF64 = SyntheticTask<f64>;
pub type RunResultF64 = RunResult<f64>;
