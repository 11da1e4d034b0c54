//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails other than those listed in `KNOWN_UNATTAINABLE`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use condmeta::domain::{ConditioningParams, ConstantBias, Dataset, Loss, SideSource, TaskInstance};
use condmeta::environments::{gen_circle, gen_clusters, gen_planted_linear, CircleEnvSpec, ClusterEnvSpec, PlantedEnvSpec};
use condmeta::harness::{emit_outputs, final_error, run_experiment, ExperimentConfig};
use condmeta::inner::{solve_batch, InnerConfig};
use condmeta::kernels::{kernel_train_meta, KernelFn};
use condmeta::meta::{meta_gradient, surrogate_loss, train_meta_observed, MetaConfig};
use condmeta::oracle::{
    best_linear_params, cluster_gap_lower_bound, cluster_gap_monte_carlo, cluster_unconditional_variance,
    estimate_variance_se, gap_report, DEFAULT_RIDGE_EPS,
};
use condmeta::features::FeatureMap;

/// Criteria expected to fail, with the reason printed next to the verdict.
const KNOWN_UNATTAINABLE: &[(usize, &str)] = &[(
    7,
    "the bound uses exp(-n D^2 / sigma^2) for the Bhattacharyya overlap, whose exponent is n D^2 / (8 sigma^2); \
     the true gap lies below it at intermediate separations",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_dataset(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Dataset {
    let x = DMatrix::from_fn(d, n, |_, _| gaussian(rng));
    let y = DVector::from_fn(n, |_, _| 2.0 * gaussian(rng));
    Dataset::from_columns(x, y).unwrap()
}

/// Dense Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// `(X X^T / n + lambda I) w = X y / n + lambda theta`, assembled entrywise.
fn ridge_with_bias(data: &Dataset, theta: &DVector<f64>, lambda: f64) -> Vec<f64> {
    let (d, n) = (data.d(), data.n());
    let nf = n as f64;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = (0..n).map(|p| data.input(p)[i] * data.input(p)[j]).sum::<f64>() / nf;
        }
        a[i][i] += lambda;
        b[i] = (0..n).map(|p| data.input(p)[i] * data.output(p)).sum::<f64>() / nf + lambda * theta[i];
    }
    gauss_solve(a, b)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let loss = Loss::squared(1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        let lambda = 10f64.powf(rng.random_range(-3.0..3.0));
        let data = random_dataset(&mut rng, d, n);
        let theta = DVector::from_fn(d, |_, _| gaussian(&mut rng));
        let w = solve_batch(&data, &theta, &loss, &InnerConfig::batch(lambda).unwrap()).unwrap().w_out;
        let oracle = ridge_with_bias(&data, &theta, lambda);
        for (a, b) in w.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("max abs error {worst:.3e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let loss = Loss::squared(1.0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(2..=12);
        let data = random_dataset(&mut rng, d, n);
        let task = TaskInstance::new(data, Dataset::empty(d), SideSource::TrainInputs, None).unwrap();
        let u = DMatrix::from_fn(k, d, |_, _| gaussian(&mut rng));
        let v = DVector::from_fn(k, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
        let map = FeatureMap::rff_from_parts(u, v).unwrap();
        let params = ConditioningParams::new(
            DMatrix::from_fn(d, k, |_, _| gaussian(&mut rng)),
            DVector::from_fn(d, |_, _| gaussian(&mut rng)),
        )
        .unwrap();
        let cfg = InnerConfig::batch(10f64.powf(rng.random_range(-1.0..1.0))).unwrap();
        let f = |p: &ConditioningParams| surrogate_loss(p, task.side(), task.train(), &loss, &cfg, &map).unwrap();
        let g = meta_gradient(&params, task.side(), task.train(), &loss, &cfg, &map).unwrap();
        let mut check = |analytic: f64, plus: ConditioningParams, minus: ConditioningParams| {
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        };
        for i in 0..d {
            for j in 0..k {
                let (mut p, mut q) = (params.clone(), params.clone());
                p.m[(i, j)] += h;
                q.m[(i, j)] -= h;
                check(g.g_m[(i, j)], p, q);
            }
            let (mut p, mut q) = (params.clone(), params.clone());
            p.b[i] += h;
            q.b[i] -= h;
            check(g.g_b[i], p, q);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(5),
        format!("max relative error {worst:.3e}, {elapsed:.2?}"),
    )
}

fn two_cluster_spec(d: usize, t_tot: usize, n_tot: usize, seed: u64) -> ClusterEnvSpec {
    let mut x2 = DVector::from_element(d, -1.0);
    x2[0] = 1.0;
    ClusterEnvSpec {
        w_centers: vec![DVector::from_element(d, 8.0), DVector::zeros(d)],
        x_centers: vec![DVector::from_element(d, 1.0), x2],
        sigma_w: 1.0,
        sigma_x: 1.0,
        n_tot,
        t_tot,
        snr: 1.0,
        seed,
    }
}

fn criterion_3() -> Outcome {
    let tasks = gen_clusters(&two_cluster_spec(20, 500, 20, 103)).unwrap();
    let loss = Loss::absolute();
    let map = FeatureMap::mean_inputs(20);
    let mut worst_slack = f64::INFINITY;
    let mut steps = 0;
    for inner in [InnerConfig::batch(0.1).unwrap(), InnerConfig::online(0.1).unwrap()] {
        let cfg = MetaConfig::new(0.01, inner, loss.clone(), 500, map.clone()).unwrap();
        train_meta_observed(&tasks, &cfg, |step| {
            let bound = loss.lipschitz() * step.input_bound * (step.phi.norm_squared() + 1.0).sqrt();
            worst_slack = worst_slack.min(bound + 1e-9 - step.gradient.frobenius_norm());
            steps += 1;
        })
        .unwrap();
    }
    outcome(
        steps == 1000 && worst_slack >= 0.0,
        format!("{steps} logged steps (batch and fine-tuning), min slack {worst_slack:.3e}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let tasks = gen_clusters(&two_cluster_spec(5, 200, 10, 104)).unwrap();
    let loss = Loss::absolute();
    let map = FeatureMap::mean_inputs(5);
    let mut worst: f64 = 0.0;
    for inner in [InnerConfig::online(0.5).unwrap(), InnerConfig::batch(0.5).unwrap()] {
        let cfg = MetaConfig::new(0.05, inner, loss.clone(), 200, map.clone()).unwrap();
        let mut explicit = Vec::new();
        train_meta_observed(&tasks, &cfg, |step| explicit.push(step.theta.clone())).unwrap();
        let kernel = kernel_train_meta(&tasks, KernelFn::linear(map.clone()), 0.05, &inner, &loss, 200).unwrap();
        for (a, b) in explicit.iter().zip(&kernel.thetas) {
            worst = worst.max((a - b).norm() / (1.0 + a.norm()));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("max relative deviation over t <= 200 {worst:.3e}, {elapsed:.2?}"),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let spec = CircleEnvSpec {
        r: 8.0,
        center: DVector::zeros(20),
        sigma: 1.0,
        input_mean: 1.0,
        n_tot: 2,
        t_tot: 20_000,
        snr: 1.0,
        seed: 105,
    };
    let tasks = gen_circle(&spec).unwrap();
    let report = gap_report(&tasks, &FeatureMap::circle()).unwrap();
    let (gap, se) = (report.gap_uncond_vs_linear, report.gap_uncond_vs_linear_se);
    let elapsed = start.elapsed();
    outcome(
        (gap - 64.0).abs() <= 3.0 * se && (gap - 64.0).abs() <= 0.05 * 64.0 && elapsed < Duration::from_secs(30),
        format!("gap {gap:.3} +- {se:.3} (target 64), {elapsed:.2?}"),
    )
}

fn criterion_6() -> Outcome {
    let d = 10;
    let specs = [
        ClusterEnvSpec {
            w_centers: vec![DVector::from_element(d, 4.0)],
            x_centers: vec![DVector::from_element(d, 1.0)],
            sigma_w: 1.0,
            sigma_x: 1.0,
            n_tot: 1,
            t_tot: 10_000,
            snr: 1.0,
            seed: 106,
        },
        two_cluster_spec(d, 10_000, 1, 107),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for spec in &specs {
        let tasks = gen_clusters(spec).unwrap();
        let w_rho = spec.w_centers.iter().fold(DVector::zeros(d), |a, c| a + c) / spec.m() as f64;
        let est = estimate_variance_se(&ConstantBias(w_rho), &tasks).unwrap();
        let closed = cluster_unconditional_variance(spec).unwrap();
        pass &= (est.mean - closed).abs() <= 3.0 * est.std_error;
        parts.push(format!("m={}: {:.3} +- {:.3} vs {closed:.3}", spec.m(), est.mean, est.std_error));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let (d, n) = (2, 20);
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, a) in [0.0, 0.25, 1.0, 4.0, 16.0].into_iter().enumerate() {
        // Separation with n ||x(1) - x(2)||^2 / sigma_x^2 = a.
        let delta = (a / n as f64).sqrt();
        let mut x1 = DVector::zeros(d);
        x1[0] = delta / 2.0;
        let spec = ClusterEnvSpec {
            w_centers: vec![DVector::from_element(d, 2.0), DVector::from_element(d, -2.0)],
            x_centers: vec![x1.clone(), -x1],
            sigma_w: 1.0,
            sigma_x: 1.0,
            n_tot: n,
            t_tot: 10_000,
            snr: 1.0,
            seed: 170 + i as u64,
        };
        let tasks = gen_clusters(&spec).unwrap();
        let gap = cluster_gap_monte_carlo(&spec, &tasks).unwrap();
        let bound = cluster_gap_lower_bound(&spec, n);
        let ok = gap.mean >= bound - 3.0 * gap.std_error;
        pass &= ok;
        parts.push(format!(
            "a={a}: gap {:.3} +- {:.3}, bound {bound:.3} {}",
            gap.mean,
            gap.std_error,
            if ok { "ok" } else { "violated" }
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (d, k) = (5, 4);
    let map = FeatureMap::rff(k, 2.0, 1, 18).unwrap();
    let m_star = DMatrix::from_fn(d, k, |_, _| gaussian(&mut rng));
    let b_star = DVector::from_fn(d, |_, _| gaussian(&mut rng));
    let spec = PlantedEnvSpec {
        m_star: m_star.clone(),
        b_star: b_star.clone(),
        feature_map: map.clone(),
        noise: 0.0,
        n_tot: 1,
        t_tot: 10_000,
        snr: 1.0,
        seed: 118,
    };
    let tasks = gen_planted_linear(&spec).unwrap();
    let fit = best_linear_params(&tasks, &map, DEFAULT_RIDGE_EPS).unwrap();
    let err = (&fit.params.m - &m_star)
        .amax()
        .max((&fit.params.b - &b_star).amax());
    outcome(err <= 1e-6, format!("max abs error {err:.3e}"))
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn criterion_9() -> (Outcome, Option<(ExperimentConfig, condmeta::harness::ExperimentResult)>) {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut kept = None;
    for (label, file) in [
        ("a", "clusters_one.toml"),
        ("b", "clusters_two_mean4.toml"),
        ("c", "clusters_two_mean0.toml"),
        ("d", "circle.toml"),
    ] {
        let cfg = ExperimentConfig::load(config_path(file)).unwrap();
        let result = run_experiment(&cfg).unwrap();
        let err = |m: &str| final_error(&result.curves, m).unwrap();
        let (itl, uncond) = (err("ITL"), err("unconditional"));
        let ok = match label {
            "a" => {
                let cond = err("conditional");
                parts.push(format!("(a) ITL {itl:.3} uncond {uncond:.3} cond {cond:.3}"));
                (cond - uncond).abs() <= 0.1 * itl && uncond < itl
            }
            "b" => {
                let cond = err("conditional");
                parts.push(format!("(b) ITL {itl:.3} uncond {uncond:.3} cond {cond:.3}"));
                cond < uncond && uncond < itl
            }
            "c" => {
                let cond = err("conditional");
                parts.push(format!("(c) ITL {itl:.3} uncond {uncond:.3} cond {cond:.3}"));
                (uncond - itl).abs() <= 0.1 * itl && cond < 0.8 * uncond
            }
            _ => {
                let (circle, rff) = (err("cond-circle"), err("cond-rff"));
                parts.push(format!(
                    "(d) ITL {itl:.3} uncond {uncond:.3} cond-circle {circle:.3} cond-rff {rff:.3}"
                ));
                circle < 0.8 * uncond && rff < uncond && (uncond - itl).abs() <= 0.1 * itl
            }
        };
        if !ok {
            parts.push(format!("({label}) ordering violated"));
        }
        pass &= ok;
        if label == "b" {
            kept = Some((cfg, result));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(20 * 60);
    parts.push(format!("{elapsed:.2?}"));
    (outcome(pass, parts.join("; ")), kept)
}

fn criterion_10(first: Option<(ExperimentConfig, condmeta::harness::ExperimentResult)>) -> Outcome {
    let Some((cfg, first)) = first else {
        return outcome(false, "no run from criterion 9 to compare against");
    };
    let second = run_experiment(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_outputs(&cfg, &first, a.path()).unwrap();
    emit_outputs(&cfg, &second, b.path()).unwrap();
    let bytes_a = std::fs::read(a.path().join("curves.csv")).unwrap();
    let bytes_b = std::fs::read(b.path().join("curves.csv")).unwrap();
    outcome(
        !bytes_a.is_empty() && bytes_a == bytes_b,
        format!("curves.csv {} bytes, identical: {}", bytes_a.len(), bytes_a == bytes_b),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8()),
    ];
    let (ninth, kept) = criterion_9();
    results.push((9, ninth));
    results.push((10, criterion_10(kept)));

    let mut unexpected = 0;
    for (id, o) in &results {
        let known = KNOWN_UNATTAINABLE.iter().find(|(k, _)| k == id);
        println!("criterion {id:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            match known {
                Some((_, reason)) => println!("              expected failure: {reason}"),
                None => unexpected += 1,
            }
        }
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("{passed}/{} criteria passed, {unexpected} unexpected failures", results.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
