//! Counterfactual learning for bandit structured prediction.
//!
//! Implements inverse propensity scoring (IPS), deterministic propensity
//! matching (DPM), their self-normalized `+R` variants and the
//! doubly-controlled / doubly-robust family for a softmax log-linear policy
//! over explicit candidate lists, with analytic gradients, a gradient-ascent
//! trainer, a synthetic task simulator and probes of the estimators'
//! degenerate optima.

pub mod degeneracy;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gradients;
pub mod io;
pub mod optimizer;
pub mod reward;
pub mod simulator;

pub use domain::{
    argmax_candidate, log_prob_gradient, policy_probs, FeatureVector, Instance, Log, LogMode,
    LoggedTuple, PolicyParams,
};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, EstimatorReport, Objective};
pub use gradients::{fd_check, GradientReport, Normalize};
pub use optimizer::{evaluate_truth, train, TrainConfig, TrainOutcome, TrainTrace};
pub use reward::{RewardModel, RewardPredictor};
pub use simulator::{generate_task, roll_log, GroundTruth, LoggingPolicy, TaskSpec};
