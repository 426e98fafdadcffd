//! N:M structured-sparsity training engine: a desk-scale encoder-decoder
//! transformer trained under competing sparsification recipes, with an
//! analytic FLOPs/parameter cost model and a packed N:M storage format.

pub mod config;
pub mod cost;
pub mod error;
pub mod model;
pub mod nm;
pub mod report;
pub mod schedule;
pub mod storage;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use config::{OptKind, OptimizerConfig, RunConfig, SweepSpec, TrainSettings};
pub use error::{Error, Result};
pub use model::{build_model, MaskSet, ModelConfig, Transformer};
pub use nm::{build_mask, build_unstructured_mask, MaskMode, NmPattern, SparsityMask};
pub use schedule::{phase_at, PhaseKind, PhaseSpec, Recipe, RecipeSchedule};
pub use storage::{pack, PackedNmTensor};
pub use task::{generate_task, Example, ToyTask};
pub use tensor::{grad_check, NodeId, Tape, Tensor};
pub use trainer::{evaluate, load_checkpoint, save_checkpoint, train, EvalMetrics};
