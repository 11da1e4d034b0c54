//! Experiment orchestration behind the `condmeta` CLI: configuration,
//! grid validation, learning curves and their export.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{EnvironmentConfig, ExperimentConfig, FeatureChoice, GridAxis, MethodConfig, MethodKind};
pub use experiment::{
    environment_tasks, evaluate_method, final_error, mean_curve, run_experiment, CurvePoint, DiagnosticsRow,
    ExperimentResult, Fitted, Selection,
};
pub use output::{emit_outputs, render_svg, write_curves};
