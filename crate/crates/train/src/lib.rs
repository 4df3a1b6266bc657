//! Desk-scale training harness: Gaussian-mixture tasks with known posteriors,
//! small scorer networks trained on a deferral surrogate, and expert-count
//! sweeps.

pub mod error;
pub mod model;
pub mod sweep;
pub mod task;
pub mod trainer;

pub use error::{Result, TrainError};
pub use model::{Architecture, ScorerModel};
pub use sweep::{summarize, sweep_experts, CellSummary, SweepConfig, SweepRow};
pub use task::{sample_features, sample_task, with_expert_predictions, SyntheticTask};
pub use trainer::{evaluate, train, EvalMetrics, TrainConfig, TrainOutcome};
