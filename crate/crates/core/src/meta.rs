//! The surrogate meta-loss, its gradient and stochastic gradient descent
//! over the conditioning parameters `(M, b)` with iterate averaging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{apply_tau, ConditioningFunction, ConditioningParams, Dataset, Loss, SideInfo, TaskInstance};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::inner::{self, InnerConfig, InnerMode, InnerResult};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Meta step size; 0 keeps `(M, b) = (0, 0)`, i.e. independent task
    /// learning.
    pub gamma: f64,
    pub inner: InnerConfig,
    pub loss: Loss,
    /// Number of tasks `T` consumed from the stream.
    pub iterations: usize,
    pub feature_map: FeatureMap,
    pub record_trajectory: bool,
}

impl MetaConfig {
    pub fn new(gamma: f64, inner: InnerConfig, loss: Loss, iterations: usize, feature_map: FeatureMap) -> Result<Self> {
        let cfg = Self {
            gamma,
            inner,
            loss,
            iterations,
            feature_map,
            record_trajectory: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("meta step size must be >= 0, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("meta iteration budget must be at least 1"));
        }
        self.inner.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaGradient {
    pub g_m: DMatrix<f64>,
    pub g_b: DVector<f64>,
}

impl MetaGradient {
    pub fn frobenius_norm(&self) -> f64 {
        (self.g_m.norm_squared() + self.g_b.norm_squared()).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainResult {
    pub avg_params: ConditioningParams,
    pub last_params: ConditioningParams,
    /// Surrogate loss of each iterate on the task it was updated with.
    pub trajectory: Option<Vec<f64>>,
}

/// `tau(s) = M phi(s) + b` for a given feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConditioner {
    pub params: ConditioningParams,
    pub feature_map: FeatureMap,
}

impl ConditioningFunction for LinearConditioner {
    fn bias(&self, side: &SideInfo) -> Result<DVector<f64>> {
        apply_tau(&self.params, &self.feature_map.apply(side)?)
    }
}

struct InnerEval {
    theta: DVector<f64>,
    result: InnerResult,
}

fn run_inner(
    params: &ConditioningParams,
    phi: &DVector<f64>,
    data: &Dataset,
    loss: &Loss,
    inner_cfg: &InnerConfig,
) -> Result<InnerEval> {
    let theta = apply_tau(params, phi)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conditioned bias"));
    }
    let result = inner::solve(data, &theta, loss, inner_cfg)?;
    Ok(InnerEval { theta, result })
}

fn surrogate_at(eval: &InnerEval, data: &Dataset, loss: &Loss, inner_cfg: &InnerConfig) -> Result<f64> {
    match inner_cfg.mode {
        InnerMode::Batch => Ok(eval.result.objective),
        InnerMode::Online => {
            inner::regularized_objective(&eval.result.w_last, data, &eval.theta, loss, inner_cfg.lambda)
        }
    }
}

fn gradient_from(eval: &InnerEval, phi: &DVector<f64>, inner_cfg: &InnerConfig) -> MetaGradient {
    let w = eval.result.gradient_point(inner_cfg.mode);
    let g_b = (w - &eval.theta) * (-inner_cfg.lambda);
    let g_m = &g_b * phi.transpose();
    MetaGradient { g_m, g_b }
}

/// `R_Z^lambda(A(tau(s), Z))`. In fine-tuning mode the objective is taken at
/// the last online iterate, the same point the meta-gradient uses.
pub fn surrogate_loss(
    params: &ConditioningParams,
    side: &SideInfo,
    data: &Dataset,
    loss: &Loss,
    inner_cfg: &InnerConfig,
    feature_map: &FeatureMap,
) -> Result<f64> {
    let phi = feature_map.apply(side)?;
    let eval = run_inner(params, &phi, data, loss, inner_cfg)?;
    surrogate_at(&eval, data, loss, inner_cfg)
}

/// `-lambda (w - theta) (phi(s)^T, 1)`, with `w` the batch minimizer or the
/// last online iterate.
pub fn meta_gradient(
    params: &ConditioningParams,
    side: &SideInfo,
    data: &Dataset,
    loss: &Loss,
    inner_cfg: &InnerConfig,
    feature_map: &FeatureMap,
) -> Result<MetaGradient> {
    let phi = feature_map.apply(side)?;
    let eval = run_inner(params, &phi, data, loss, inner_cfg)?;
    Ok(gradient_from(&eval, &phi, inner_cfg))
}

/// Everything computed during one iteration of [`train_meta_observed`].
#[derive(Debug)]
pub struct MetaStep<'a> {
    /// 1-based iteration index.
    pub t: usize,
    /// The iterate `(M_t, b_t)` before the update.
    pub params: &'a ConditioningParams,
    pub phi: &'a DVector<f64>,
    pub theta: &'a DVector<f64>,
    /// The inner output used for the gradient.
    pub w: &'a DVector<f64>,
    pub gradient: &'a MetaGradient,
    /// `max_i ||x_i||` over the task's training data.
    pub input_bound: f64,
}

pub fn train_meta<'a, I>(tasks: I, cfg: &MetaConfig) -> Result<MetaTrainResult>
where
    I: IntoIterator<Item = &'a TaskInstance>,
{
    train_meta_observed(tasks, cfg, |_| {})
}

/// Stochastic gradient descent on the surrogate loss starting from
/// `(M_1, b_1) = (0, 0)`, one task per step; returns the average of the
/// iterates `(M_t, b_t)`, `t = 1..T`.
pub fn train_meta_observed<'a, I, F>(tasks: I, cfg: &MetaConfig, mut observer: F) -> Result<MetaTrainResult>
where
    I: IntoIterator<Item = &'a TaskInstance>,
    F: FnMut(&MetaStep<'_>),
{
    cfg.validate()?;
    let mut stream = tasks.into_iter();
    let k = cfg.feature_map.k();
    let mut params: Option<ConditioningParams> = None;
    let mut sum: Option<ConditioningParams> = None;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);

    for t in 1..=cfg.iterations {
        let task = stream.next().ok_or(Error::InsufficientTasks {
            needed: cfg.iterations,
            available: t - 1,
        })?;
        let d = task.d();
        let current = params.get_or_insert_with(|| ConditioningParams::zeros(d, k));
        let acc = sum.get_or_insert_with(|| ConditioningParams::zeros(d, k));
        if current.d() != d {
            return Err(Error::Dimension {
                context: "task stream dimension",
                expected: current.d(),
                got: d,
            });
        }
        acc.m += &current.m;
        acc.b += &current.b;

        let data = task.train();
        let phi = cfg.feature_map.apply(task.side())?;
        let eval = run_inner(current, &phi, data, &cfg.loss, &cfg.inner)?;
        let gradient = gradient_from(&eval, &phi, &cfg.inner);
        if let Some(traj) = trajectory.as_mut() {
            traj.push(surrogate_at(&eval, data, &cfg.loss, &cfg.inner)?);
        }
        observer(&MetaStep {
            t,
            params: current,
            phi: &phi,
            theta: &eval.theta,
            w: eval.result.gradient_point(cfg.inner.mode),
            gradient: &gradient,
            input_bound: data.input_bound(),
        });

        if cfg.gamma != 0.0 {
            if k > 0 {
                current.m -= &gradient.g_m * cfg.gamma;
            }
            current.b.axpy(-cfg.gamma, &gradient.g_b, 1.0);
        }
    }

    let last = params.expect("at least one iteration ran");
    let mut avg = sum.expect("at least one iteration ran");
    let scale = 1.0 / cfg.iterations as f64;
    avg.m *= scale;
    avg.b *= scale;
    Ok(MetaTrainResult {
        avg_params: avg,
        last_params: last,
        trajectory,
    })
}

/// Inner regularization and meta step size that balance the excess-risk
/// bound: `lambda = 2 R L / (Var sqrt(n))` and
/// `gamma = ||(M, b)||_F / (L R sqrt(K^2 + 1) sqrt(T))`.
pub fn theoretical_hyperparams(
    var_estimate: f64,
    norm_mb: f64,
    lipschitz: f64,
    input_bound: f64,
    feature_bound: f64,
    n: usize,
    t: usize,
) -> Result<(f64, f64)> {
    let positive = [var_estimate, norm_mb, lipschitz, input_bound, feature_bound]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
    if !positive || n == 0 || t == 0 {
        return Err(Error::invalid("theoretical hyperparameters need positive inputs"));
    }
    let lambda = 2.0 * input_bound * lipschitz / (var_estimate * (n as f64).sqrt());
    let gamma = norm_mb
        / (lipschitz * input_bound * (feature_bound * feature_bound + 1.0).sqrt() * (t as f64).sqrt());
    Ok((lambda, gamma))
}
