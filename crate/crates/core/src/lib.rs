//! Tabular n-gram policies, prospect-theoretic utilities, humanline
//! clipping and rejection, alignment objectives and training loops.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod humanline;
pub mod objectives;
pub mod policy;
pub mod prospect;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use data::{PreferenceRecord, RewardKind, RewardSource, SamplingConfig, SortTask};
pub use error::{Error, Result};
pub use humanline::{HumanlineConfig, HumanlineMode, SyncPeriod};
pub use objectives::{Group, KlBaseline, Labeled, LossConfig, Models, Objective, Pair};
pub use policy::{DetachMask, GradTape, Policy, PolicySpec, SamplingParams, Sequence, TokenId, Vocabulary};
pub use prospect::{OutcomeDistribution, ProspectParams};
pub use rng::{Purpose, Rng, Streams};
pub use scalar::{Mass, Scalar};
pub use trainer::{OnlineConfig, OptimizerConfig, StepMetrics, TrainState, TrainerConfig, Variant};

pub type Policy64 = Policy<f64>;
pub type Policy32 = Policy<f32>;
pub type ProspectParams64 = ProspectParams<f64>;
pub type TrainState64 = TrainState<f64>;
