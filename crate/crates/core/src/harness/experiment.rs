//! Validation protocol and learning-curve generation.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{loss_eval, ConditioningFunction, ConstantBias, Loss, SideInfo, TaskInstance};
use crate::environments::{gen_circle, gen_clusters, load_csv_env, split_tasks, ValidationView};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::inner::{self, InnerConfig};
use crate::meta::{train_meta, LinearConditioner, MetaConfig};
use crate::oracle::{gap_report, GapReport};

use super::config::{EnvironmentConfig, ExperimentConfig, MethodConfig, MethodKind, RunConfig};

const SPLIT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const FEATURE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

/// One point of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub test_error: f64,
}

/// Hyperparameters chosen on the validation tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub seed: u64,
    pub lambda: f64,
    pub gamma: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub seed: u64,
    pub method: String,
    #[serde(flatten)]
    pub report: GapReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub curves: Vec<CurvePoint>,
    pub selections: Vec<Selection>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub warnings: Vec<String>,
}

/// A trained conditioning function.
#[derive(Clone, Debug, PartialEq)]
pub enum Fitted {
    Constant(ConstantBias),
    Linear(LinearConditioner),
}

impl ConditioningFunction for Fitted {
    fn bias(&self, side: &SideInfo) -> Result<DVector<f64>> {
        match self {
            Fitted::Constant(c) => c.bias(side),
            Fitted::Linear(l) => l.bias(side),
        }
    }
}

/// Per task: `theta = model(side)`, `w = A(theta, Z_tr)`, error of `w` on
/// `Z_te`; returns the mean over tasks. Tasks without held-out points are
/// skipped.
pub fn evaluate_method(
    model: &dyn ConditioningFunction,
    tasks: &[TaskInstance],
    loss: &Loss,
    inner_cfg: &InnerConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for task in tasks {
        if task.test().is_empty() {
            log::warn!("skipping an evaluation task without held-out points");
            continue;
        }
        let theta = model.bias(task.side())?;
        let w = inner::solve(task.train(), &theta, loss, inner_cfg)?.w_out;
        total += loss_eval(loss, &w, task.test())?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyData);
    }
    Ok(total / counted as f64)
}

/// Generates or loads the tasks of one seed.
pub fn environment_tasks(env: &EnvironmentConfig, seed: u64) -> Result<Vec<TaskInstance>> {
    if let Some(spec) = env.cluster_spec(seed)? {
        return gen_clusters(&spec);
    }
    if let Some(spec) = env.circle_spec(seed)? {
        return gen_circle(&spec);
    }
    match env {
        EnvironmentConfig::Csv { path, schema } => load_csv_env(path, *schema),
        _ => unreachable!("synthetic environments handled above"),
    }
}

struct Context<'a> {
    run: &'a RunConfig,
    loss: Loss,
}

impl Context<'_> {
    fn fit(
        &self,
        method: &MethodConfig,
        map: &FeatureMap,
        train: &[TaskInstance],
        t: usize,
        lambda: f64,
        gamma: f64,
    ) -> Result<Fitted> {
        let d = train[0].d();
        match method.kind {
            MethodKind::Itl => Ok(Fitted::Constant(ConstantBias(DVector::zeros(d)))),
            MethodKind::Mean => {
                let mean = crate::oracle::unconditional_mean(train)?;
                Ok(Fitted::Constant(ConstantBias(mean)))
            }
            MethodKind::Unconditional | MethodKind::Conditional => {
                let cfg = MetaConfig::new(gamma, self.run.inner(lambda)?, self.loss, t, map.clone())?;
                let res = train_meta(&train[..t], &cfg)?;
                Ok(Fitted::Linear(LinearConditioner {
                    params: res.avg_params,
                    feature_map: map.clone(),
                }))
            }
        }
    }

    /// Mean error of the method trained with `(lambda, gamma)` on the
    /// first `t` training tasks. Divergent runs score `+inf`.
    #[allow(clippy::too_many_arguments)]
    fn score(
        &self,
        method: &MethodConfig,
        map: &FeatureMap,
        train: &[TaskInstance],
        eval: &[TaskInstance],
        t: usize,
        lambda: f64,
        gamma: f64,
    ) -> Result<f64> {
        let outcome = self.fit(method, map, train, t, lambda, gamma).and_then(|model| {
            evaluate_method(&model, eval, &self.loss, &self.run.inner(lambda)?)
        });
        match outcome {
            Ok(e) if e.is_finite() => Ok(e),
            Ok(_) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// Grid search on the validation tasks at `T = T_tr`. Only the
    /// training and validation tasks are reachable from here.
    fn select(
        &self,
        method: &MethodConfig,
        map: &FeatureMap,
        view: ValidationView<'_>,
        candidates: &[(f64, f64)],
    ) -> Result<(f64, f64, f64)> {
        let t = view.train.len();
        let cell = |&(lambda, gamma): &(f64, f64)| self.score(method, map, view.train, view.val, t, lambda, gamma);
        let scores: Vec<f64> = if self.run.parallel {
            candidates.par_iter().map(cell).collect::<Result<_>>()?
        } else {
            candidates.iter().map(cell).collect::<Result<_>>()?
        };
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s < scores[best] {
                best = i;
            }
        }
        let (lambda, gamma) = candidates[best];
        Ok((lambda, gamma, scores[best]))
    }
}

fn side_dimension(side: &SideInfo) -> usize {
    match side {
        SideInfo::Scalar(_) => 1,
        SideInfo::Inputs(x) => x.nrows(),
        SideInfo::Datapoints(z) => z.d(),
    }
}

/// Runs every method on every seed: grid selection on the validation
/// tasks, then test error at each checkpoint with the selected pair.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let ctx = Context {
        run: &cfg.run,
        loss: cfg.run.loss()?,
    };
    let lambdas = cfg.lambda_grid();
    let gammas = cfg.gamma_grid();
    let checkpoints = cfg.checkpoints();
    let mut result = ExperimentResult::default();

    for &seed in &cfg.run.seeds {
        let tasks = environment_tasks(&cfg.environment, seed)?;
        let split = split_tasks(
            &tasks,
            cfg.splits.train,
            cfg.splits.val,
            cfg.splits.test,
            cfg.splits.fraction,
            seed ^ SPLIT_STREAM,
        )?;
        let d = split.train[0].d();
        let side_dim = side_dimension(split.train[0].side());

        for method in &cfg.methods {
            if method.kind == MethodKind::Mean && split.train.iter().any(|t| t.target().is_none()) {
                let msg = format!(
                    "method '{}' skipped for seed {seed}: task targets are unavailable",
                    method.name
                );
                log::warn!("{msg}");
                result.warnings.push(msg);
                continue;
            }
            let map = method.feature_map(d, side_dim, seed ^ FEATURE_STREAM)?;
            let gamma_axis: Vec<f64> = if method.uses_gamma() { gammas.clone() } else { vec![0.0] };
            let candidates: Vec<(f64, f64)> = lambdas
                .iter()
                .flat_map(|l| gamma_axis.iter().map(move |g| (*l, *g)))
                .collect();
            let (lambda, gamma, val_error) = ctx.select(method, &map, split.validation_view(), &candidates)?;
            log::info!(
                "seed {seed} method {}: lambda {lambda:e} gamma {gamma:e} validation error {val_error}",
                method.name
            );
            result.selections.push(Selection {
                method: method.name.clone(),
                seed,
                lambda,
                gamma,
                val_error,
            });

            let point = |&t: &usize| -> Result<CurvePoint> {
                let test_error = ctx.score(method, &map, &split.train, &split.test, t, lambda, gamma)?;
                Ok(CurvePoint {
                    method: method.name.clone(),
                    seed,
                    t,
                    lambda,
                    gamma,
                    test_error,
                })
            };
            let points: Vec<CurvePoint> = if cfg.run.parallel {
                checkpoints.par_iter().map(point).collect::<Result<_>>()?
            } else {
                checkpoints.iter().map(point).collect::<Result<_>>()?
            };
            result.curves.extend(points);
        }

        if cfg.environment.is_synthetic() {
            for method in cfg.methods.iter().filter(|m| m.kind == MethodKind::Conditional) {
                let map = method.feature_map(d, side_dim, seed ^ FEATURE_STREAM)?;
                result.diagnostics.push(DiagnosticsRow {
                    seed,
                    method: method.name.clone(),
                    report: gap_report(&tasks, &map)?,
                });
            }
        }
    }
    Ok(result)
}

/// Seed-averaged curve of one method: `(T, mean error, standard error)`.
pub fn mean_curve(curves: &[CurvePoint], method: &str) -> Vec<(usize, f64, f64)> {
    let mut ts: Vec<usize> = curves.iter().filter(|p| p.method == method).map(|p| p.t).collect();
    ts.sort_unstable();
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let errs: Vec<f64> = curves
                .iter()
                .filter(|p| p.method == method && p.t == t)
                .map(|p| p.test_error)
                .collect();
            let est = crate::oracle::Estimate::from_samples(&errs);
            let se = if errs.len() < 2 { 0.0 } else { est.std_error };
            (t, est.mean, se)
        })
        .collect()
}

/// Seed-averaged error of `method` at the last checkpoint.
pub fn final_error(curves: &[CurvePoint], method: &str) -> Option<f64> {
    mean_curve(curves, method).last().map(|p| p.1)
}
