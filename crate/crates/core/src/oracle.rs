//! Population-level quantities for environments whose task targets are
//! known: variances of conditioning functions, the best linear
//! conditioning function in hindsight and the conditional/unconditional
//! gap.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{ConditioningFunction, ConditioningParams, ConstantBias, SideInfo, TaskInstance};
use crate::environments::ClusterEnvSpec;
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMap;
use crate::meta::LinearConditioner;

/// Relative singular-value cutoff of the pseudo-inverse.
pub const DEFAULT_RIDGE_EPS: f64 = 1e-10;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        if samples.is_empty() {
            return Self { mean: f64::NAN, std_error: f64::NAN };
        }
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() < 2 {
            return Self { mean, std_error: f64::INFINITY };
        }
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

fn target(task: &TaskInstance) -> Result<&DVector<f64>> {
    task.target()
        .ok_or_else(|| Error::OracleUnavailable("task has no ground-truth target".into()))
}

fn squared_errors(tau: &dyn ConditioningFunction, tasks: &[TaskInstance]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|task| {
            let w = target(task)?;
            let theta = tau.bias(task.side())?;
            check_dim("conditioning function output", w.len(), theta.len())?;
            Ok((w - theta).norm_squared())
        })
        .collect()
}

/// `(1/T) sum ||w_mu - tau(s)||^2`, the Monte-Carlo estimate of `Var(tau)^2`.
pub fn estimate_variance(tau: &dyn ConditioningFunction, tasks: &[TaskInstance]) -> Result<f64> {
    Ok(estimate_variance_se(tau, tasks)?.mean)
}

pub fn estimate_variance_se(tau: &dyn ConditioningFunction, tasks: &[TaskInstance]) -> Result<Estimate> {
    if tasks.is_empty() {
        return Err(Error::OracleUnavailable("no tasks".into()));
    }
    Ok(Estimate::from_samples(&squared_errors(tau, tasks)?))
}

/// Mean of the task targets.
pub fn unconditional_mean(tasks: &[TaskInstance]) -> Result<DVector<f64>> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::OracleUnavailable("no tasks".into()))?;
    let mut sum = DVector::zeros(first.d());
    for task in tasks {
        let w = target(task)?;
        check_dim("task target", sum.len(), w.len())?;
        sum += w;
    }
    Ok(sum / tasks.len() as f64)
}

/// `Var(w_rho)^2 = d sigma_w^2 + (1/2m^2) sum_{i,j} ||w(i) - w(j)||^2` for a
/// uniform mixture of isotropic Gaussian clusters.
pub fn cluster_unconditional_variance(spec: &ClusterEnvSpec) -> Result<f64> {
    spec.validate()?;
    let m = spec.m() as f64;
    Ok(spec.d() as f64 * spec.sigma_w * spec.sigma_w + pairwise(spec, |_, _| 1.0) / (2.0 * m * m))
}

fn pairwise(spec: &ClusterEnvSpec, weight: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..spec.m() {
        for j in 0..spec.m() {
            total += weight(i, j) * (&spec.w_centers[i] - &spec.w_centers[j]).norm_squared();
        }
    }
    total
}

/// Lower bound on `Var(w_rho)^2 - Var(tau_rho)^2` for cluster environments
/// observed through `n` inputs per task:
/// `(1/2m^2) sum_{i,j} (1 - (m/2) exp(-(n/sigma_x^2) ||x(i) - x(j)||^2)) ||w(i) - w(j)||^2`.
pub fn cluster_gap_lower_bound(spec: &ClusterEnvSpec, n: usize) -> f64 {
    let m = spec.m() as f64;
    let s2 = spec.sigma_x * spec.sigma_x;
    let total = pairwise(spec, |i, j| {
        let dx = (&spec.x_centers[i] - &spec.x_centers[j]).norm_squared();
        1.0 - 0.5 * m * (-(n as f64) / s2 * dx).exp()
    });
    total / (2.0 * m * m)
}

/// `E[w_mu | X]` for a cluster task whose side information is the input
/// collection `X`: the posterior-weighted mean of the cluster centers.
pub fn cluster_posterior_mean(spec: &ClusterEnvSpec, side: &SideInfo) -> Result<DVector<f64>> {
    let x = match side {
        SideInfo::Inputs(x) => x,
        SideInfo::Datapoints(z) => z.inputs(),
        SideInfo::Scalar(_) => return Err(Error::SideInfoKind("cluster posterior mean")),
    };
    check_dim("cluster side inputs", spec.d(), x.nrows())?;
    let s2 = spec.sigma_x * spec.sigma_x;
    let log_lik: Vec<f64> = spec
        .x_centers
        .iter()
        .map(|c| {
            -x.column_iter()
                .map(|col| (col - c).norm_squared())
                .sum::<f64>()
                / (2.0 * s2)
        })
        .collect();
    let top = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_lik.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(spec.d());
    for (w, c) in weights.iter().zip(&spec.w_centers) {
        mean.axpy(w / z, c, 1.0);
    }
    Ok(mean)
}

/// Monte-Carlo estimate of `Var(w_rho)^2 - Var(tau_rho)^2` on cluster tasks,
/// using the exact population mean and the exact posterior mean.
pub fn cluster_gap_monte_carlo(spec: &ClusterEnvSpec, tasks: &[TaskInstance]) -> Result<Estimate> {
    spec.validate()?;
    if tasks.is_empty() {
        return Err(Error::OracleUnavailable("no tasks".into()));
    }
    let m = spec.m() as f64;
    let w_rho = spec
        .w_centers
        .iter()
        .fold(DVector::zeros(spec.d()), |acc, c| acc + c)
        / m;
    let diffs = tasks
        .iter()
        .map(|task| {
            let w = target(task)?;
            let tau = cluster_posterior_mean(spec, task.side())?;
            Ok((w - &w_rho).norm_squared() - (w - tau).norm_squared())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&diffs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestLinear {
    pub params: ConditioningParams,
    /// `Var(tau_hat)^2` of the fitted function on the same tasks.
    pub variance: f64,
    /// `Var(w_hat)^2` of the empirical mean on the same tasks.
    pub unconditional_variance: f64,
}

/// Pseudo-inverse with singular values below `ridge_eps * scale` treated as
/// zero, where `scale` is the larger of `sigma_max` and `floor`.
fn pseudo_inverse(a: &DMatrix<f64>, ridge_eps: f64, floor: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let top = svd.singular_values.max();
    let cutoff = ridge_eps * top.max(floor);
    let u = svd.u.as_ref().expect("computed u");
    let vt = svd.v_t.as_ref().expect("computed v_t");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            out += vt.row(i).transpose() * u.column(i).transpose() / *s;
        }
    }
    out
}

/// Least-squares conditioning function in hindsight:
/// `M = Cov(w, phi) Cov(phi, phi)^+` and `b = w_hat - M nu_hat`.
pub fn best_linear_params(tasks: &[TaskInstance], feature_map: &FeatureMap, ridge_eps: f64) -> Result<BestLinear> {
    if tasks.len() < 2 {
        return Err(Error::InsufficientTasks {
            needed: 2,
            available: tasks.len(),
        });
    }
    if !(ridge_eps >= 0.0) {
        return Err(Error::invalid("ridge_eps must be non-negative"));
    }
    let d = tasks[0].d();
    let k = feature_map.k();
    let count = tasks.len() as f64;
    let phis = tasks
        .iter()
        .map(|t| feature_map.apply(t.side()))
        .collect::<Result<Vec<_>>>()?;
    let w_hat = unconditional_mean(tasks)?;
    let nu = phis.iter().fold(DVector::zeros(k), |acc, p| acc + p) / count;

    let mut cov_ws = DMatrix::zeros(d, k);
    let mut cov_ss = DMatrix::zeros(k, k);
    for (task, phi) in tasks.iter().zip(&phis) {
        let dw = target(task)? - &w_hat;
        let ds = phi - &nu;
        cov_ws += &dw * ds.transpose();
        cov_ss += &ds * ds.transpose();
    }
    cov_ws /= count;
    cov_ss /= count;

    // Centering leaves rounding noise of order eps * E||phi||^2 in the
    // covariance of constant features; measure the cutoff against that scale.
    let second_moment = phis.iter().map(|p| p.norm_squared()).sum::<f64>() / count;
    let m = if k == 0 {
        DMatrix::zeros(d, 0)
    } else {
        cov_ws * pseudo_inverse(&cov_ss, ridge_eps, second_moment)
    };
    let b = &w_hat - &m * &nu;
    let params = ConditioningParams::new(m, b)?;
    let fitted = LinearConditioner {
        params: params.clone(),
        feature_map: feature_map.clone(),
    };
    let variance = estimate_variance(&fitted, tasks)?;
    let unconditional_variance = estimate_variance(&ConstantBias(w_hat), tasks)?;
    if variance > unconditional_variance * (1.0 + 1e-9) + 1e-12 {
        log::warn!("best linear fit has variance {variance} above the unconditional {unconditional_variance}");
    }
    Ok(BestLinear {
        params,
        variance,
        unconditional_variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub feature: String,
    pub tasks: usize,
    pub var_itl: f64,
    pub var_uncond: f64,
    pub var_best_linear: f64,
    pub gap_itl_vs_uncond: f64,
    pub gap_itl_vs_uncond_se: f64,
    pub gap_uncond_vs_linear: f64,
    pub gap_uncond_vs_linear_se: f64,
}

/// Variances of the ITL bias (0), the empirical mean and the best linear
/// function of `feature_map`, with standard errors of the two gaps taken
/// over the per-task paired differences.
pub fn gap_report(tasks: &[TaskInstance], feature_map: &FeatureMap) -> Result<GapReport> {
    let best = best_linear_params(tasks, feature_map, DEFAULT_RIDGE_EPS)?;
    let d = tasks[0].d();
    let w_hat = unconditional_mean(tasks)?;
    let fitted = LinearConditioner {
        params: best.params.clone(),
        feature_map: feature_map.clone(),
    };
    let itl = squared_errors(&ConstantBias(DVector::zeros(d)), tasks)?;
    let uncond = squared_errors(&ConstantBias(w_hat), tasks)?;
    let linear = squared_errors(&fitted, tasks)?;
    let paired = |a: &[f64], b: &[f64]| {
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Estimate::from_samples(&diffs)
    };
    let (var_itl, var_uncond, var_best_linear) = (
        Estimate::from_samples(&itl).mean,
        Estimate::from_samples(&uncond).mean,
        Estimate::from_samples(&linear).mean,
    );
    let g1 = paired(&itl, &uncond);
    let g2 = paired(&uncond, &linear);
    Ok(GapReport {
        feature: feature_map.name().to_string(),
        tasks: tasks.len(),
        var_itl,
        var_uncond,
        var_best_linear,
        gap_itl_vs_uncond: var_itl - var_uncond,
        gap_itl_vs_uncond_se: g1.std_error,
        gap_uncond_vs_linear: var_uncond - var_best_linear,
        gap_uncond_vs_linear_se: g2.std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Dataset, SideSource};
    use crate::environments::{gen_circle, gen_clusters, gen_planted_linear, CircleEnvSpec, PlantedEnvSpec};
    use approx::assert_abs_diff_eq;

    fn clusters(w: &[f64], x: &[f64], d: usize, t_tot: usize, seed: u64) -> ClusterEnvSpec {
        ClusterEnvSpec {
            w_centers: w.iter().map(|c| DVector::from_element(d, *c)).collect(),
            x_centers: x.iter().map(|c| DVector::from_element(d, *c)).collect(),
            sigma_w: 1.0,
            sigma_x: 1.0,
            n_tot: 5,
            t_tot,
            snr: 1.0,
            seed,
        }
    }

    fn circle(t_tot: usize, seed: u64) -> CircleEnvSpec {
        CircleEnvSpec {
            r: 8.0,
            center: DVector::zeros(4),
            sigma: 1.0,
            input_mean: 0.0,
            n_tot: 4,
            t_tot,
            snr: 1.0,
            seed,
        }
    }

    fn task_with_target(w: &[f64]) -> TaskInstance {
        let d = w.len();
        let data = Dataset::new(vec![DVector::from_element(d, 1.0)], vec![0.0]).unwrap();
        TaskInstance::new(data, Dataset::empty(d), SideSource::Scalar(0.5), Some(DVector::from_column_slice(w)))
            .unwrap()
    }

    #[test]
    fn exact_conditioning_has_zero_variance() {
        let spec = PlantedEnvSpec {
            m_star: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
            b_star: DVector::from_vec(vec![0.3, 0.1]),
            feature_map: FeatureMap::circle(),
            noise: 0.0,
            n_tot: 3,
            t_tot: 50,
            snr: 1.0,
            seed: 1,
        };
        let tasks = gen_planted_linear(&spec).unwrap();
        let tau = LinearConditioner {
            params: ConditioningParams::new(spec.m_star.clone(), spec.b_star.clone()).unwrap(),
            feature_map: FeatureMap::circle(),
        };
        assert!(estimate_variance(&tau, &tasks).unwrap() < 1e-24);
    }

    #[test]
    fn missing_targets_are_reported() {
        let data = Dataset::new(vec![DVector::from_element(2, 1.0)], vec![0.0]).unwrap();
        let task = TaskInstance::new(data, Dataset::empty(2), SideSource::Scalar(0.1), None).unwrap();
        let tasks = vec![task.clone(), task];
        assert!(matches!(unconditional_mean(&tasks), Err(Error::OracleUnavailable(_))));
        assert!(matches!(
            estimate_variance(&ConstantBias(DVector::zeros(2)), &tasks),
            Err(Error::OracleUnavailable(_))
        ));
    }

    #[test]
    fn single_task_mean_is_its_target() {
        let tasks = vec![task_with_target(&[1.5, -2.0])];
        assert_eq!(unconditional_mean(&tasks).unwrap(), DVector::from_vec(vec![1.5, -2.0]));
    }

    #[test]
    fn single_cluster_variance_is_d_sigma_squared() {
        let spec = clusters(&[4.0], &[0.0], 5, 10_000, 2);
        let tasks = gen_clusters(&spec).unwrap();
        let w_hat = unconditional_mean(&tasks).unwrap();
        let est = estimate_variance_se(&ConstantBias(w_hat), &tasks).unwrap();
        assert!((est.mean - 5.0).abs() <= 3.0 * est.std_error, "{est:?}");
        assert_eq!(cluster_unconditional_variance(&spec).unwrap(), 5.0);
    }

    #[test]
    fn symmetric_clusters_have_zero_mean() {
        let spec = clusters(&[4.0, -4.0], &[1.0, -1.0], 3, 10_000, 3);
        let tasks = gen_clusters(&spec).unwrap();
        let mean = unconditional_mean(&tasks).unwrap();
        // each coordinate has variance 1 + 16 around 0
        assert!(mean.amax() <= 4.0 * (17.0f64 / 10_000.0).sqrt());
    }

    #[test]
    fn circle_mean_is_near_center() {
        let tasks = gen_circle(&circle(10_000, 4)).unwrap();
        let mean = unconditional_mean(&tasks).unwrap();
        // variance of a coordinate: r^2/2 + sigma^2
        assert!(mean.amax() <= 4.0 * (33.0f64 / 10_000.0).sqrt());
    }

    #[test]
    fn lower_bound_trivial_cases() {
        let one = clusters(&[3.0], &[1.0], 2, 1, 0);
        assert_eq!(cluster_gap_lower_bound(&one, 10), 0.0);
        let same_x = clusters(&[3.0, -3.0], &[1.0, 1.0], 2, 1, 0);
        assert_eq!(cluster_gap_lower_bound(&same_x, 10), 0.0);
        // far apart: (1/8) * 2 * ||w(1) - w(2)||^2
        let far = clusters(&[3.0, -3.0], &[50.0, -50.0], 2, 1, 0);
        assert_abs_diff_eq!(cluster_gap_lower_bound(&far, 10), 0.25 * 72.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_mean_picks_the_obvious_cluster() {
        let spec = clusters(&[3.0, -3.0], &[10.0, -10.0], 2, 1, 0);
        let side = SideInfo::inputs(DMatrix::from_element(2, 3, 9.5)).unwrap();
        let tau = cluster_posterior_mean(&spec, &side).unwrap();
        assert!((tau - DVector::from_element(2, 3.0)).amax() < 1e-12);
        let tied = SideInfo::inputs(DMatrix::zeros(2, 2)).unwrap();
        assert!(cluster_posterior_mean(&spec, &tied).unwrap().amax() < 1e-12);
    }

    #[test]
    fn well_separated_clusters_have_gap_above_bound() {
        let spec = clusters(&[2.0, -2.0], &[3.0, -3.0], 3, 4000, 5);
        let tasks = gen_clusters(&spec).unwrap();
        let gap = cluster_gap_monte_carlo(&spec, &tasks).unwrap();
        let bound = cluster_gap_lower_bound(&spec, spec.n_tot);
        assert!(gap.mean >= bound - 3.0 * gap.std_error, "{gap:?} vs {bound}");
    }

    #[test]
    fn planted_recovery() {
        let map = FeatureMap::circle();
        let spec = PlantedEnvSpec {
            m_star: DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]),
            b_star: DVector::from_vec(vec![0.2, -0.4, 1.0]),
            feature_map: map.clone(),
            noise: 0.0,
            n_tot: 2,
            t_tot: 2000,
            snr: 1.0,
            seed: 6,
        };
        let tasks = gen_planted_linear(&spec).unwrap();
        let best = best_linear_params(&tasks, &map, DEFAULT_RIDGE_EPS).unwrap();
        assert!((&best.params.m - &spec.m_star).amax() <= 1e-6);
        assert!((&best.params.b - &spec.b_star).amax() <= 1e-6);
        assert!(best.variance < 1e-12);
    }

    #[test]
    fn constant_features_give_the_mean() {
        let tasks = gen_circle(&circle(200, 7)).unwrap();
        let map = FeatureMap::rff_from_parts(DMatrix::zeros(3, 1), DVector::zeros(3)).unwrap();
        let best = best_linear_params(&tasks, &map, DEFAULT_RIDGE_EPS).unwrap();
        assert!(best.params.m.amax() < 1e-12);
        let w_hat = unconditional_mean(&tasks).unwrap();
        assert!((&best.params.b - w_hat).amax() < 1e-12);
    }

    #[test]
    fn circle_fit_recovers_the_radius() {
        let tasks = gen_circle(&circle(20_000, 8)).unwrap();
        let best = best_linear_params(&tasks, &FeatureMap::circle(), DEFAULT_RIDGE_EPS).unwrap();
        let mut want = DMatrix::zeros(4, 2);
        want[(0, 0)] = 8.0;
        want[(1, 1)] = 8.0;
        assert!((&best.params.m - want).amax() < 0.1);
        assert!(best.params.b.amax() < 0.1);
        let report = gap_report(&tasks, &FeatureMap::circle()).unwrap();
        let dev = (report.gap_uncond_vs_linear - 64.0).abs();
        assert!(dev <= 3.0 * report.gap_uncond_vs_linear_se, "{report:?}");
    }

    #[test]
    fn report_identities() {
        let spec = clusters(&[4.0, 1.0], &[1.0, -1.0], 3, 500, 9);
        let tasks = gen_clusters(&spec).unwrap();
        let report = gap_report(&tasks, &FeatureMap::mean_inputs(3)).unwrap();
        let w_hat = unconditional_mean(&tasks).unwrap();
        assert_abs_diff_eq!(report.gap_itl_vs_uncond, w_hat.norm_squared(), epsilon = 1e-10);
        assert!(report.var_best_linear <= report.var_uncond);
    }

    #[test]
    fn zero_mean_environment_has_equal_itl_and_uncond() {
        let tasks = vec![task_with_target(&[1.0, 2.0]), task_with_target(&[-1.0, -2.0])];
        let report = gap_report(&tasks, &FeatureMap::zero()).unwrap();
        assert_eq!(report.var_itl, report.var_uncond);
        assert_eq!(report.gap_uncond_vs_linear, 0.0);
    }

    #[test]
    fn single_cluster_has_no_conditional_gap() {
        let spec = clusters(&[4.0], &[0.0], 3, 5000, 10);
        let tasks = gen_clusters(&spec).unwrap();
        let report = gap_report(&tasks, &FeatureMap::mean_inputs(3)).unwrap();
        assert!(report.gap_uncond_vs_linear.abs() <= 0.05 * report.var_uncond, "{report:?}");
    }

    #[test]
    fn pseudo_inverse_drops_tiny_directions() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1e-14]);
        let p = pseudo_inverse(&a, 1e-10, 0.0);
        assert_abs_diff_eq!(p[(0, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(p[(1, 1)], 0.0);
    }
}
