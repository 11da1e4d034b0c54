//! Task environments: synthetic generators (clusters, circle, planted
//! linear), CSV ingestion and the meta-train / validation / test split.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, SideInfo, SideSource, TaskInstance};
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMap;

/// Uniform mixture of `m` Gaussian clusters of tasks. Each task's side
/// information is the input collection of its training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEnvSpec {
    pub w_centers: Vec<DVector<f64>>,
    pub x_centers: Vec<DVector<f64>>,
    /// Standard deviation of `w_mu` around its cluster mean.
    pub sigma_w: f64,
    /// Standard deviation of the inputs around their cluster mean.
    pub sigma_x: f64,
    pub n_tot: usize,
    pub t_tot: usize,
    pub snr: f64,
    pub seed: u64,
}

impl ClusterEnvSpec {
    pub fn m(&self) -> usize {
        self.w_centers.len()
    }

    pub fn d(&self) -> usize {
        self.w_centers.first().map_or(0, |w| w.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_centers.is_empty() {
            return Err(Error::invalid("cluster environment needs at least one cluster"));
        }
        check_dim("cluster input centers", self.m(), self.x_centers.len())?;
        let d = self.d();
        if d == 0 {
            return Err(Error::invalid("cluster dimension must be at least 1"));
        }
        for c in self.w_centers.iter().chain(&self.x_centers) {
            check_dim("cluster center", d, c.len())?;
        }
        if !(self.sigma_w > 0.0) || !(self.sigma_x > 0.0) {
            return Err(Error::invalid("cluster scatters must be positive"));
        }
        validate_sizes(self.n_tot, self.t_tot, self.snr)
    }
}

/// Tasks whose mean target lies on a circle of radius `r` parametrized by
/// the scalar side information `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleEnvSpec {
    pub r: f64,
    pub center: DVector<f64>,
    /// Standard deviation of `w_mu` around `h(s) + center`.
    pub sigma: f64,
    /// Inputs are drawn from `N(input_mean * 1, I)`.
    pub input_mean: f64,
    pub n_tot: usize,
    pub t_tot: usize,
    pub snr: f64,
    pub seed: u64,
}

impl CircleEnvSpec {
    pub fn d(&self) -> usize {
        self.center.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() < 2 {
            return Err(Error::Dimension {
                context: "circle environment (d >= 2)",
                expected: 2,
                got: self.d(),
            });
        }
        if !(self.r > 0.0) {
            return Err(Error::invalid("circle radius must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("circle scatter must be non-negative"));
        }
        validate_sizes(self.n_tot, self.t_tot, self.snr)
    }

    /// `h(s) + c`, the conditional mean of `w_mu` given `s`.
    pub fn curve(&self, s: f64) -> DVector<f64> {
        let mut h = self.center.clone();
        h[0] += self.r * (2.0 * PI * s).cos();
        h[1] += self.r * (2.0 * PI * s).sin();
        h
    }
}

/// Environment in which the conditional mean of `w_mu` is exactly
/// `M* phi(s) + b*`, with `s` uniform on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedEnvSpec {
    pub m_star: DMatrix<f64>,
    pub b_star: DVector<f64>,
    pub feature_map: FeatureMap,
    /// Standard deviation of `w_mu` around the planted mean.
    pub noise: f64,
    pub n_tot: usize,
    pub t_tot: usize,
    pub snr: f64,
    pub seed: u64,
}

fn validate_sizes(n_tot: usize, t_tot: usize, snr: f64) -> Result<()> {
    if n_tot == 0 || t_tot == 0 {
        return Err(Error::invalid("n_tot and t_tot must be at least 1"));
    }
    if !(snr > 0.0) {
        return Err(Error::invalid("snr must be positive"));
    }
    Ok(())
}

fn gaussian_vector(rng: &mut ChaCha8Rng, mean: &DVector<f64>, std: f64) -> DVector<f64> {
    DVector::from_fn(mean.len(), |i, _| mean[i] + std * rng.sample::<f64, _>(StandardNormal))
}

/// Samples `n` points `y = <x, w> + eps` with `x ~ N(input_mean, input_std^2 I)`
/// and `eps ~ N(0, noise_std^2)`, where `noise_std` is the population standard
/// deviation of the noiseless outputs divided by `snr`. Returns the dataset
/// and `noise_std`.
pub fn sample_linear_task(
    rng: &mut ChaCha8Rng,
    w: &DVector<f64>,
    input_mean: &DVector<f64>,
    input_std: f64,
    n: usize,
    snr: f64,
) -> Result<(Dataset, f64)> {
    let d = w.len();
    let mut inputs = DMatrix::zeros(d, n);
    for mut col in inputs.column_iter_mut() {
        col.copy_from(&gaussian_vector(rng, input_mean, input_std));
    }
    let clean = inputs.tr_mul(w);
    let noise_std = calibrated_noise_std(clean.as_slice(), snr);
    let outputs = clean.map(|y| y + noise_std * rng.sample::<f64, _>(StandardNormal));
    Ok((Dataset::from_columns(inputs, outputs)?, noise_std))
}

/// `std(clean) / snr`, with the population standard deviation.
pub fn calibrated_noise_std(clean: &[f64], snr: f64) -> f64 {
    let n = clean.len() as f64;
    let mean = clean.iter().sum::<f64>() / n;
    let var = clean.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    var.sqrt() / snr
}

pub fn gen_clusters(spec: &ClusterEnvSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d();
    (0..spec.t_tot)
        .map(|_| {
            let j = rng.random_range(0..spec.m());
            let w = gaussian_vector(&mut rng, &spec.w_centers[j], spec.sigma_w);
            let (data, _) =
                sample_linear_task(&mut rng, &w, &spec.x_centers[j], spec.sigma_x, spec.n_tot, spec.snr)?;
            TaskInstance::new(data, Dataset::empty(d), SideSource::TrainInputs, Some(w))
        })
        .collect()
}

pub fn gen_circle(spec: &CircleEnvSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d();
    let input_mean = DVector::from_element(d, spec.input_mean);
    (0..spec.t_tot)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..1.0);
            let w = gaussian_vector(&mut rng, &spec.curve(s), spec.sigma);
            let (data, _) = sample_linear_task(&mut rng, &w, &input_mean, 1.0, spec.n_tot, spec.snr)?;
            TaskInstance::new(data, Dataset::empty(d), SideSource::Scalar(s), Some(w))
        })
        .collect()
}

pub fn gen_planted_linear(spec: &PlantedEnvSpec) -> Result<Vec<TaskInstance>> {
    let d = spec.b_star.len();
    check_dim("planted slope rows", d, spec.m_star.nrows())?;
    check_dim("planted slope columns", spec.feature_map.k(), spec.m_star.ncols())?;
    if !(spec.noise >= 0.0) {
        return Err(Error::invalid("planted noise must be non-negative"));
    }
    validate_sizes(spec.n_tot, spec.t_tot, spec.snr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let input_mean = DVector::zeros(d);
    (0..spec.t_tot)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..1.0);
            let phi = spec.feature_map.apply(&SideInfo::Scalar(s))?;
            let mean = &spec.m_star * phi + &spec.b_star;
            let w = if spec.noise > 0.0 {
                gaussian_vector(&mut rng, &mean, spec.noise)
            } else {
                mean
            };
            let (data, _) = sample_linear_task(&mut rng, &w, &input_mean, 1.0, spec.n_tot, spec.snr)?;
            TaskInstance::new(data, Dataset::empty(d), SideSource::Scalar(s), Some(w))
        })
        .collect()
}

/// Column layout of a multi-task CSV file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvSchema {
    /// 13 inputs, ratings in `[0, 10]`, datapoint side information.
    Lenk,
    /// 26 inputs, input side information.
    Schools,
    /// Any number of inputs, input side information, or scalar side
    /// information when a `side` column is present.
    Generic,
}

impl CsvSchema {
    pub fn dimension(&self) -> Option<usize> {
        match self {
            CsvSchema::Lenk => Some(13),
            CsvSchema::Schools => Some(26),
            CsvSchema::Generic => None,
        }
    }
}

struct CsvColumns {
    task: usize,
    y: usize,
    xs: Vec<usize>,
    side: Option<usize>,
}

fn parse_header(header: &csv::StringRecord) -> Result<CsvColumns> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let schema_err = |message: String| Error::Schema { row: 1, message };
    let task = find("task_id").ok_or_else(|| schema_err("missing column task_id".into()))?;
    let y = find("y").ok_or_else(|| schema_err("missing column y".into()))?;
    let mut xs = Vec::new();
    while let Some(col) = find(&format!("x_{}", xs.len() + 1)) {
        xs.push(col);
    }
    if xs.is_empty() {
        return Err(schema_err("missing input columns x_1..x_d".into()));
    }
    let known = 2 + xs.len() + usize::from(find("side").is_some());
    if header.len() != known {
        return Err(schema_err(format!(
            "unexpected columns; expected task_id, y, x_1..x_{} and optionally side",
            xs.len()
        )));
    }
    Ok(CsvColumns {
        task,
        y,
        xs,
        side: find("side"),
    })
}

/// Reads one row per datapoint (`task_id, y, x_1..x_d`, header required)
/// and groups rows into tasks in order of first appearance.
pub fn load_csv_env(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Vec<TaskInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_env(file, schema)
}

pub fn read_csv_env<R: std::io::Read>(reader: R, schema: CsvSchema) -> Result<Vec<TaskInstance>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = parse_header(&header)?;
    let d = cols.xs.len();
    if let Some(expected) = schema.dimension() {
        if d != expected {
            return Err(Error::Schema {
                row: 1,
                message: format!("{schema:?} schema expects {expected} inputs, found {d}"),
            });
        }
    }

    struct Group {
        xs: Vec<DVector<f64>>,
        ys: Vec<f64>,
        side: Option<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Group> = HashMap::new();

    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Schema {
                row,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let num = |col: usize, name: &str| -> Result<f64> {
            let raw = &record[col];
            let v: f64 = raw.parse().map_err(|_| Error::Schema {
                row,
                message: format!("column {name}: cannot parse {raw:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Schema {
                    row,
                    message: format!("column {name}: non-finite value"),
                });
            }
            Ok(v)
        };
        let task_id = record[cols.task].to_string();
        if task_id.is_empty() {
            return Err(Error::Schema {
                row,
                message: "empty task_id".into(),
            });
        }
        let y = num(cols.y, "y")?;
        if schema == CsvSchema::Lenk && !(0.0..=10.0).contains(&y) {
            return Err(Error::Schema {
                row,
                message: format!("rating {y} outside [0, 10]"),
            });
        }
        let x = cols
            .xs
            .iter()
            .enumerate()
            .map(|(i, &c)| num(c, &format!("x_{}", i + 1)))
            .collect::<Result<Vec<f64>>>()?;
        let side = cols.side.map(|c| num(c, "side")).transpose()?;
        let group = groups.entry(task_id.clone()).or_insert_with(|| {
            order.push(task_id.clone());
            Group {
                xs: Vec::new(),
                ys: Vec::new(),
                side,
            }
        });
        if group.side != side {
            return Err(Error::Schema {
                row,
                message: format!("task {task_id} has inconsistent side values"),
            });
        }
        group.xs.push(DVector::from_vec(x));
        group.ys.push(y);
    }

    if order.is_empty() {
        return Err(Error::Schema {
            row: 1,
            message: "file contains no tasks".into(),
        });
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).expect("every id in order has a group");
            let source = match (schema, g.side) {
                (_, Some(s)) => SideSource::Scalar(s),
                (CsvSchema::Lenk, None) => SideSource::TrainDatapoints,
                (_, None) => SideSource::TrainInputs,
            };
            let data = Dataset::new(g.xs, g.ys)?;
            TaskInstance::new(data, Dataset::empty(d), source, None)
        })
        .collect()
}

/// Writes every datapoint of `tasks` in the generic schema. Tasks with
/// scalar side information get a `side` column.
pub fn write_csv_env<W: std::io::Write>(writer: W, tasks: &[TaskInstance]) -> Result<()> {
    let Some(first) = tasks.first() else {
        return Ok(());
    };
    let d = first.d();
    let with_side = matches!(first.source(), SideSource::Scalar(_));
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["task_id".to_string(), "y".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    if with_side {
        header.push("side".into());
    }
    wtr.write_record(&header)?;
    for (t, task) in tasks.iter().enumerate() {
        let data = task.all_data();
        for i in 0..data.n() {
            let mut rec = vec![t.to_string(), data.output(i).to_string()];
            rec.extend(data.input(i).iter().map(|v| v.to_string()));
            if let SideSource::Scalar(s) = task.source() {
                rec.push(s.to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Disjoint meta-train / meta-validation / meta-test partition.
///
/// Meta-training tasks only carry their training split. Validation and
/// test tasks carry both; their side information is rebuilt from the
/// training split alone.
#[derive(Clone, Debug)]
pub struct MetaSplit {
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

/// The part of a [`MetaSplit`] that hyperparameter selection may read.
#[derive(Clone, Copy, Debug)]
pub struct ValidationView<'a> {
    pub train: &'a [TaskInstance],
    pub val: &'a [TaskInstance],
}

impl MetaSplit {
    pub fn validation_view(&self) -> ValidationView<'_> {
        ValidationView {
            train: &self.train,
            val: &self.val,
        }
    }
}

fn training_size(n: usize, fraction: f64) -> usize {
    let n_tr = (fraction * n as f64).round() as usize;
    n_tr.clamp(1, n.saturating_sub(1).max(1))
}

/// Shuffles the tasks, takes `t_tr`, `t_va` and `t_te` of them in that
/// order, and splits every task's data into a training part of
/// `round(fraction * n)` points (at least one, and leaving at least one for
/// testing) and a held-out remainder.
pub fn split_tasks(
    tasks: &[TaskInstance],
    t_tr: usize,
    t_va: usize,
    t_te: usize,
    within_train_fraction: f64,
    seed: u64,
) -> Result<MetaSplit> {
    if !(within_train_fraction > 0.0 && within_train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "within-task training fraction must be in (0, 1), got {within_train_fraction}"
        )));
    }
    let needed = t_tr + t_va + t_te;
    if needed > tasks.len() {
        return Err(Error::InsufficientTasks {
            needed,
            available: tasks.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng);

    let mut split_one = |task: &TaskInstance, keep_test: bool| -> Result<TaskInstance> {
        let all = task.all_data();
        let n = all.n();
        if keep_test && n < 2 {
            return Err(Error::invalid("evaluation tasks need at least two datapoints"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_tr = training_size(n, within_train_fraction);
        let train = all.select(&idx[..n_tr]);
        let test = if keep_test {
            all.select(&idx[n_tr..])
        } else {
            Dataset::empty(all.d())
        };
        task.resplit(train, test)
    };

    let mut train = Vec::with_capacity(t_tr);
    let mut val = Vec::with_capacity(t_va);
    let mut test = Vec::with_capacity(t_te);
    for (pos, &i) in order.iter().take(needed).enumerate() {
        if pos < t_tr {
            train.push(split_one(&tasks[i], false)?);
        } else if pos < t_tr + t_va {
            val.push(split_one(&tasks[i], true)?);
        } else {
            test.push(split_one(&tasks[i], true)?);
        }
    }
    Ok(MetaSplit { train, val, test })
}
