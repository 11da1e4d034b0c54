//! Within-task algorithms `A(theta, Z)`: biased regularized ERM and online
//! gradient descent started at the bias (fine-tuning).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{loss_eval, Dataset, LossKind, Loss};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerMode {
    Batch,
    Online,
}

/// Solver for batch mode with the absolute loss. The squared loss is
/// always solved in closed form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSolver {
    /// Exact coordinate ascent on the box-constrained dual; stops once the
    /// duality gap is below `batch_tol`, which certifies the objective.
    #[default]
    DualCoordinate,
    /// Subgradient descent with step `2 / (lambda (t+1))` and
    /// `(t+1)`-weighted averaging; stops once the objective changes by less
    /// than `batch_tol` over a window of 10 iterations.
    Subgradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub lambda: f64,
    pub mode: InnerMode,
    /// Iteration cap; epochs over the data for the dual solver.
    pub batch_max_iters: usize,
    pub batch_tol: f64,
    #[serde(default)]
    pub batch_solver: BatchSolver,
}

impl InnerConfig {
    pub const DEFAULT_MAX_ITERS: usize = 2000;
    pub const DEFAULT_TOL: f64 = 1e-9;

    pub fn new(lambda: f64, mode: InnerMode) -> Result<Self> {
        let cfg = Self {
            lambda,
            mode,
            batch_max_iters: Self::DEFAULT_MAX_ITERS,
            batch_tol: Self::DEFAULT_TOL,
            batch_solver: BatchSolver::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn batch(lambda: f64) -> Result<Self> {
        Self::new(lambda, InnerMode::Batch)
    }

    pub fn online(lambda: f64) -> Result<Self> {
        Self::new(lambda, InnerMode::Online)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let cfg = Self { lambda, ..*self };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.batch_max_iters == 0 {
            return Err(Error::invalid("batch_max_iters must be at least 1"));
        }
        if !(self.batch_tol > 0.0) {
            return Err(Error::invalid("batch_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerResult {
    /// The algorithm's output `A(theta, Z)`.
    pub w_out: DVector<f64>,
    /// Last online iterate `w_{n+1}`; equal to `w_out` in batch mode.
    pub w_last: DVector<f64>,
    /// `R_Z^lambda(w_out)`.
    pub objective: f64,
}

impl InnerResult {
    /// The point used for the meta-gradient: the minimizer in batch mode,
    /// the last iterate in fine-tuning mode.
    pub fn gradient_point(&self, mode: InnerMode) -> &DVector<f64> {
        match mode {
            InnerMode::Batch => &self.w_out,
            InnerMode::Online => &self.w_last,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must be positive and finite, got {lambda}")))
    }
}

/// `R_Z(w) + lambda/2 * ||w - theta||^2`.
pub fn regularized_objective(
    w: &DVector<f64>,
    data: &Dataset,
    theta: &DVector<f64>,
    loss: &Loss,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    check_dim("regularized_objective bias", w.len(), theta.len())?;
    let risk = loss_eval(loss, w, data)?;
    Ok(risk + 0.5 * lambda * (w - theta).norm_squared())
}

/// Runs whichever inner algorithm `cfg.mode` selects.
pub fn solve(data: &Dataset, theta: &DVector<f64>, loss: &Loss, cfg: &InnerConfig) -> Result<InnerResult> {
    match cfg.mode {
        InnerMode::Batch => solve_batch(data, theta, loss, cfg),
        InnerMode::Online => solve_online(data, theta, loss, cfg.lambda),
    }
}

/// Biased regularized ERM, `argmin_w R_Z^lambda(w)`.
///
/// Squared loss is solved in closed form; the absolute loss uses
/// `cfg.batch_solver`.
pub fn solve_batch(data: &Dataset, theta: &DVector<f64>, loss: &Loss, cfg: &InnerConfig) -> Result<InnerResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    check_dim("solve_batch bias", data.d(), theta.len())?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inner bias"));
    }
    let w = match loss.kind() {
        LossKind::Squared => ridge_with_bias(data, theta, cfg.lambda),
        LossKind::Absolute => match cfg.batch_solver {
            BatchSolver::DualCoordinate => dual_coordinate_ascent(data, theta, cfg),
            BatchSolver::Subgradient => subgradient_descent(data, theta, loss, cfg)?,
        },
    };
    let objective = regularized_objective(&w, data, theta, loss, cfg.lambda)?;
    Ok(InnerResult {
        w_last: w.clone(),
        w_out: w,
        objective,
    })
}

/// `(X^T X / n + lambda I)^{-1} (X^T y / n + lambda theta)`
fn ridge_with_bias(data: &Dataset, theta: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = data.n() as f64;
    let x = data.inputs();
    let d = data.d();
    let mut system: DMatrix<f64> = (x * x.transpose()) / n;
    for i in 0..d {
        system[(i, i)] += lambda;
    }
    let rhs = (x * data.outputs()) / n + theta * lambda;
    // lambda > 0 makes the system positive definite
    let chol = system
        .cholesky()
        .expect("regularized normal equations are positive definite");
    chol.solve(&rhs)
}

/// Maximizes the dual of the absolute-loss problem,
/// `D(a) = (1/n) sum a_i (<x_i, theta> - y_i) - ||sum a_i x_i||^2 / (2 lambda n^2)`
/// over `a in [-1, 1]^n`, one exact coordinate step at a time. The primal
/// point is `w = theta - sum a_i x_i / (lambda n)`.
fn dual_coordinate_ascent(data: &Dataset, theta: &DVector<f64>, cfg: &InnerConfig) -> DVector<f64> {
    let lambda = cfg.lambda;
    let n = data.n();
    let nf = n as f64;
    let x = data.inputs();
    let y = data.outputs();
    let sq_norms: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let resid_at_theta = x.tr_mul(theta) - y;
    let mut alpha = vec![0.0; n];
    let mut w = theta.clone();
    for _ in 0..cfg.batch_max_iters {
        for i in 0..n {
            let xi = x.column(i);
            let new = if sq_norms[i] > 0.0 {
                let margin = xi.dot(&w) - y[i];
                (alpha[i] + lambda * nf * margin / sq_norms[i]).clamp(-1.0, 1.0)
            } else if resid_at_theta[i] > 0.0 {
                1.0
            } else {
                -1.0
            };
            let delta = new - alpha[i];
            if delta != 0.0 {
                w.axpy(-delta / (lambda * nf), &xi, 1.0);
                alpha[i] = new;
            }
        }
        let margins = x.tr_mul(&w) - y;
        let primal = margins.iter().map(|m| m.abs()).sum::<f64>() / nf + 0.5 * lambda * (&w - theta).norm_squared();
        let dual = alpha.iter().zip(resid_at_theta.iter()).map(|(a, r)| a * r).sum::<f64>() / nf
            - 0.5 * lambda * (&w - theta).norm_squared();
        if primal - dual <= cfg.batch_tol {
            break;
        }
    }
    w
}

const WINDOW: usize = 10;

fn subgradient_descent(
    data: &Dataset,
    theta: &DVector<f64>,
    loss: &Loss,
    cfg: &InnerConfig,
) -> Result<DVector<f64>> {
    let lambda = cfg.lambda;
    let n = data.n() as f64;
    let x = data.inputs();
    let mut w = theta.clone();
    let mut avg = theta.clone();
    let mut weight_sum = 0.0;
    let mut last_obj = f64::INFINITY;
    for t in 1..=cfg.batch_max_iters {
        let weight = (t + 1) as f64;
        weight_sum += weight;
        avg += (&w - &avg) * (weight / weight_sum);

        let preds = x.tr_mul(&w);
        let coeffs = DVector::from_iterator(
            data.n(),
            preds
                .iter()
                .zip(data.outputs().iter())
                .map(|(&p, &y)| loss.subgradient(p, y)),
        );
        let grad = (x * coeffs) / n + (&w - theta) * lambda;
        w.axpy(-2.0 / (lambda * (t + 1) as f64), &grad, 1.0);

        if t % WINDOW == 0 {
            let obj = regularized_objective(&avg, data, theta, loss, lambda)?;
            if !obj.is_finite() {
                return Err(Error::NonFinite("batch inner objective"));
            }
            if (last_obj - obj).abs() < cfg.batch_tol {
                break;
            }
            last_obj = obj;
        }
    }
    Ok(avg)
}

/// Online gradient descent on `R_Z^lambda` started at `w_1 = theta`:
/// `w_{i+1} = w_i - (s_i x_i + lambda (w_i - theta)) / (lambda i)`.
///
/// Returns the average of `w_1..w_n` as output and `w_{n+1}` as last
/// iterate. Data is visited in the given order.
pub fn solve_online(data: &Dataset, theta: &DVector<f64>, loss: &Loss, lambda: f64) -> Result<InnerResult> {
    check_lambda(lambda)?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    check_dim("solve_online bias", data.d(), theta.len())?;
    let n = data.n();
    let mut w = theta.clone();
    let mut sum = DVector::zeros(theta.len());
    for i in 0..n {
        sum += &w;
        let x = data.input(i);
        let s = loss.subgradient(x.dot(&w), data.output(i));
        let step = 1.0 / (lambda * (i + 1) as f64);
        // w <- w - step * (s x + lambda (w - theta))
        let shrink = step * lambda;
        w *= 1.0 - shrink;
        w.axpy(shrink, theta, 1.0);
        w.axpy(-step * s, &x, 1.0);
    }
    let w_out = sum / n as f64;
    let objective = regularized_objective(&w_out, data, theta, loss, lambda)?;
    Ok(InnerResult {
        w_out,
        w_last: w,
        objective,
    })
}
