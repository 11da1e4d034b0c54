//! Conditional meta-learning of biased regularization and fine-tuning.
//!
//! A conditioning function `tau(s) = M phi(s) + b` maps a task's side
//! information `s` to the bias of a within-task learner. The crate provides
//! the within-task solvers ([`inner`]), the stochastic meta-algorithm over
//! `(M, b)` ([`meta`]) and its kernel form ([`kernels`]), feature maps
//! ([`features`]), synthetic and CSV task environments ([`environments`]),
//! population-level oracles for synthetic environments ([`oracle`]) and the
//! experiment harness behind the `condmeta` CLI ([`harness`]).

pub mod domain;
pub mod environments;
pub mod error;
pub mod features;
pub mod harness;
pub mod inner;
pub mod kernels;
pub mod meta;
pub mod oracle;

pub use domain::{
    apply_tau, loss_eval, ConditioningFunction, ConditioningParams, ConstantBias, Dataset, Loss,
    LossKind, SideInfo, SideSource, TaskInstance,
};
pub use error::{Error, Result};
pub use features::FeatureMap;
pub use inner::{BatchSolver, InnerConfig, InnerMode, InnerResult};
pub use meta::{train_meta, LinearConditioner, MetaConfig, MetaGradient, MetaTrainResult};
pub use kernels::{kernel_predict, kernel_train_meta, KernelFn, KernelModel};
pub use oracle::{best_linear_params, estimate_variance, gap_report, unconditional_mean, GapReport};
pub use harness::{run_experiment, ExperimentConfig};
