//! Meta-training through kernel evaluations only. The bias for a new task
//! is the expansion `theta = b - gamma * sum_j c_j g_j k(s_j, s)` over the
//! history of meta-gradients.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::domain::{ConditioningFunction, SideInfo, TaskInstance};
use crate::error::{check_dim, Error, Result};
use crate::features::{phi_mean_inputs, phi_xy_outer, FeatureMap};
use crate::inner::{self, InnerConfig};
use crate::domain::Loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFn {
    /// `k(s, s') = phi(s)^T phi(s')`.
    Linear { feature_map: FeatureMap },
    /// `exp(-||e(s) - e(s')||^2 / (2 bandwidth^2))` with `e` the mean
    /// embedding of the side information.
    Gaussian { bandwidth: f64 },
}

impl KernelFn {
    pub fn linear(feature_map: FeatureMap) -> Self {
        KernelFn::Linear { feature_map }
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelFn::Gaussian { bandwidth })
    }

    pub fn eval(&self, a: &SideInfo, b: &SideInfo) -> Result<f64> {
        match self {
            KernelFn::Linear { feature_map } => Ok(feature_map.apply(a)?.dot(&feature_map.apply(b)?)),
            KernelFn::Gaussian { bandwidth } => {
                let (ea, eb) = (mean_embedding(a)?, mean_embedding(b)?);
                check_dim("gaussian kernel embedding", ea.len(), eb.len())?;
                Ok((-(ea - eb).norm_squared() / (2.0 * bandwidth * bandwidth)).exp())
            }
        }
    }
}

/// Scalars embed as themselves, input collections as their mean, datapoint
/// collections as the mean of `vec(x (y, 1)^T)`.
pub fn mean_embedding(side: &SideInfo) -> Result<DVector<f64>> {
    match side {
        SideInfo::Scalar(s) => Ok(DVector::from_element(1, *s)),
        SideInfo::Inputs(x) => phi_mean_inputs(x),
        SideInfo::Datapoints(z) => phi_xy_outer(z),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub kernel: KernelFn,
    /// `(s_j, g_j)` for every completed iteration.
    pub history: Vec<(SideInfo, DVector<f64>)>,
    /// Weight of each history entry in the expansion.
    pub coefficients: Vec<f64>,
    pub b: DVector<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl KernelModel {
    pub fn zero(kernel: KernelFn, d: usize, gamma: f64, lambda: f64) -> Self {
        Self {
            kernel,
            history: Vec::new(),
            coefficients: Vec::new(),
            b: DVector::zeros(d),
            gamma,
            lambda,
        }
    }

    pub fn d(&self) -> usize {
        self.b.len()
    }
}

impl ConditioningFunction for KernelModel {
    fn bias(&self, side: &SideInfo) -> Result<DVector<f64>> {
        kernel_predict(self, side)
    }
}

pub fn kernel_predict(model: &KernelModel, side: &SideInfo) -> Result<DVector<f64>> {
    check_dim("kernel model coefficients", model.history.len(), model.coefficients.len())?;
    let mut theta = model.b.clone();
    if model.gamma == 0.0 {
        return Ok(theta);
    }
    for ((s_j, g_j), c_j) in model.history.iter().zip(&model.coefficients) {
        if *c_j == 0.0 {
            continue;
        }
        let k = model.kernel.eval(s_j, side)?;
        theta.axpy(-model.gamma * c_j * k, g_j, 1.0);
    }
    Ok(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTrainResult {
    /// Predicts `theta_{T+1}`, the iterate after the last update.
    pub last: KernelModel,
    /// Predicts the mean of `theta_1, ..., theta_T`.
    pub averaged: KernelModel,
    /// `theta_t` computed on the `t`-th task of the stream.
    pub thetas: Vec<DVector<f64>>,
}

/// Kernel form of the meta-algorithm. With `k(s, s') = phi(s)^T phi(s')`
/// every `theta_t` equals the explicit iterate `M_t phi(s_t) + b_t`.
///
/// The averaged model gives entry `j` (1-based) the weight `(T - j) / T`:
/// the gradient `g_j` enters the predictors of iterations `j+1..T` only.
pub fn kernel_train_meta<'a, I>(
    tasks: I,
    kernel: KernelFn,
    gamma: f64,
    inner_cfg: &InnerConfig,
    loss: &Loss,
    iterations: usize,
) -> Result<KernelTrainResult>
where
    I: IntoIterator<Item = &'a TaskInstance>,
{
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("meta step size must be >= 0, got {gamma}")));
    }
    if iterations == 0 {
        return Err(Error::invalid("meta iteration budget must be at least 1"));
    }
    inner_cfg.validate()?;
    let lambda = inner_cfg.lambda;
    let mut stream = tasks.into_iter();
    let mut model: Option<KernelModel> = None;
    let mut b_sum: Option<DVector<f64>> = None;
    let mut thetas = Vec::with_capacity(iterations);

    for t in 1..=iterations {
        let task = stream.next().ok_or(Error::InsufficientTasks {
            needed: iterations,
            available: t - 1,
        })?;
        let current = model.get_or_insert_with(|| KernelModel::zero(kernel.clone(), task.d(), gamma, lambda));
        check_dim("task stream dimension", current.d(), task.d())?;
        let acc = b_sum.get_or_insert_with(|| DVector::zeros(task.d()));
        *acc += &current.b;

        let theta = kernel_predict(current, task.side())?;
        let out = inner::solve(task.train(), &theta, loss, inner_cfg)?;
        let g = (out.gradient_point(inner_cfg.mode) - &theta) * (-lambda);
        current.history.push((task.side().clone(), g));
        current.coefficients.push(1.0);
        let g = &current.history.last().expect("just pushed").1;
        current.b.axpy(-gamma, g, 1.0);
        thetas.push(theta);
    }

    let last = model.expect("at least one iteration ran");
    let total = iterations as f64;
    let averaged = KernelModel {
        coefficients: (1..=iterations).map(|j| (iterations - j) as f64 / total).collect(),
        b: b_sum.expect("at least one iteration ran") / total,
        ..last.clone()
    };
    Ok(KernelTrainResult { last, averaged, thetas })
}
