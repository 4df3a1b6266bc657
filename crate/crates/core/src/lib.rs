//! Multi-expert learning to defer: surrogate losses, closed-form conditional
//! risks, Bayes-optimal deferral and numerical consistency checks.
//!
//! All label and expert indices are 0-based. A score vector has the `K`
//! label scores first, then one deferral score per expert.

pub mod consistency;
pub mod domain;
pub mod error;
pub mod experts;
pub mod fixture;
pub mod losses;
pub mod optim;
pub mod risk;
pub mod seed;
pub mod testbed;

pub use domain::{ConditionalPoint, Decision, ExpertJointModel, LabeledSample, ModelKind, ScoreVector, WrongLabelProfile};
pub use error::{Error, Result};
pub use losses::{BaseLoss, Family, SurrogateSpec};
pub use optim::OptimizerConfig;
