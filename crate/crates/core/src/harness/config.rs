//! Experiment configuration, read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::domain::Loss;
use crate::environments::{CircleEnvSpec, ClusterEnvSpec, CsvSchema};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::inner::{InnerConfig, InnerMode};

/// A center given either as a scalar `c` (meaning `c * 1`) or as a vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Center {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Center {
    pub fn to_vector(&self, d: usize) -> Result<DVector<f64>> {
        match self {
            Center::Scalar(c) => Ok(DVector::from_element(d, *c)),
            Center::Vector(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            Center::Vector(v) => Err(Error::Config(format!(
                "center has {} entries but the environment dimension is {d}",
                v.len()
            ))),
        }
    }
}

impl Default for Center {
    fn default() -> Self {
        Center::Scalar(0.0)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Clusters {
        d: usize,
        n_tot: usize,
        t_tot: usize,
        #[serde(default = "one")]
        snr: f64,
        w_centers: Vec<Center>,
        x_centers: Vec<Center>,
        #[serde(default = "one")]
        sigma_w: f64,
        #[serde(default = "one")]
        sigma_x: f64,
    },
    Circle {
        d: usize,
        n_tot: usize,
        t_tot: usize,
        #[serde(default = "one")]
        snr: f64,
        r: f64,
        #[serde(default)]
        center: Center,
        #[serde(default = "one")]
        sigma: f64,
        /// Inputs are drawn from `N(input_mean * 1, I)`, as in the cluster
        /// settings where every input center has entries of magnitude 1.
        #[serde(default = "one")]
        input_mean: f64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl EnvironmentConfig {
    pub fn is_synthetic(&self) -> bool {
        !matches!(self, EnvironmentConfig::Csv { .. })
    }

    /// Input dimension, if known without reading data.
    pub fn dimension(&self) -> Option<usize> {
        match self {
            EnvironmentConfig::Clusters { d, .. } | EnvironmentConfig::Circle { d, .. } => Some(*d),
            EnvironmentConfig::Csv { schema, .. } => schema.dimension(),
        }
    }

    pub fn total_tasks(&self) -> Option<usize> {
        match self {
            EnvironmentConfig::Clusters { t_tot, .. } | EnvironmentConfig::Circle { t_tot, .. } => Some(*t_tot),
            EnvironmentConfig::Csv { .. } => None,
        }
    }

    pub fn cluster_spec(&self, seed: u64) -> Result<Option<ClusterEnvSpec>> {
        let EnvironmentConfig::Clusters {
            d,
            n_tot,
            t_tot,
            snr,
            w_centers,
            x_centers,
            sigma_w,
            sigma_x,
        } = self
        else {
            return Ok(None);
        };
        let spec = ClusterEnvSpec {
            w_centers: w_centers.iter().map(|c| c.to_vector(*d)).collect::<Result<_>>()?,
            x_centers: x_centers.iter().map(|c| c.to_vector(*d)).collect::<Result<_>>()?,
            sigma_w: *sigma_w,
            sigma_x: *sigma_x,
            n_tot: *n_tot,
            t_tot: *t_tot,
            snr: *snr,
            seed,
        };
        spec.validate().map_err(as_config)?;
        Ok(Some(spec))
    }

    pub fn circle_spec(&self, seed: u64) -> Result<Option<CircleEnvSpec>> {
        let EnvironmentConfig::Circle {
            d,
            n_tot,
            t_tot,
            snr,
            r,
            center,
            sigma,
            input_mean,
        } = self
        else {
            return Ok(None);
        };
        let spec = CircleEnvSpec {
            r: *r,
            center: center.to_vector(*d)?,
            sigma: *sigma,
            input_mean: *input_mean,
            n_tot: *n_tot,
            t_tot: *t_tot,
            snr: *snr,
            seed,
        };
        spec.validate().map_err(as_config)?;
        Ok(Some(spec))
    }

    fn default_grid(&self) -> GridAxis {
        match self {
            EnvironmentConfig::Circle { .. } => GridAxis::LogRange {
                count: 16,
                min: 1e-7,
                max: 1e7,
            },
            _ => GridAxis::LogRange {
                count: 14,
                min: 1e-5,
                max: 1e5,
            },
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    /// `tau = 0`, no meta-learning.
    Itl,
    /// A single learned bias `b`.
    Unconditional,
    /// `tau(s) = M phi(s) + b` with the configured feature map.
    Conditional,
    /// `tau = ` mean of the meta-training targets; synthetic data only.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChoice {
    MeanInputs,
    XyOuter,
    Circle,
    Rff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rff_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rff_sigma: Option<f64>,
}

impl MethodConfig {
    /// Whether the method has a meta step size to validate.
    pub fn uses_gamma(&self) -> bool {
        matches!(self.kind, MethodKind::Unconditional | MethodKind::Conditional)
    }

    /// The feature map for input dimension `d` (the raw side-information
    /// dimension for the random features; 1 for scalar side information).
    pub fn feature_map(&self, d: usize, side_dim: usize, seed: u64) -> Result<FeatureMap> {
        match self.kind {
            MethodKind::Itl | MethodKind::Mean | MethodKind::Unconditional => Ok(FeatureMap::zero()),
            MethodKind::Conditional => match self.feature {
                Some(FeatureChoice::MeanInputs) => Ok(FeatureMap::mean_inputs(d)),
                Some(FeatureChoice::XyOuter) => Ok(FeatureMap::xy_outer(d)),
                Some(FeatureChoice::Circle) => Ok(FeatureMap::circle()),
                Some(FeatureChoice::Rff) => {
                    let k = self.rff_k.unwrap_or(50);
                    let sigma = self.rff_sigma.unwrap_or(1.0);
                    FeatureMap::rff(k, sigma, side_dim, seed).map_err(as_config)
                }
                None => Err(Error::Config(format!("method '{}' needs a feature map", self.name))),
            },
        }
    }
}

/// Candidate values: an explicit list or `count` log-spaced values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxis {
    Values(Vec<f64>),
    LogRange { count: usize, min: f64, max: f64 },
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridAxis::Values(v) => v.clone(),
            GridAxis::LogRange { count, min, max } => log_space(*min, *max, *count),
        }
    }
}

pub fn log_space(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (a, b) = (min.log10(), max.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<GridAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GridAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of each task's points used for within-task training.
    #[serde(default = "half")]
    pub fraction: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_mode")]
    pub inner_mode: InnerMode,
    #[serde(default = "default_loss")]
    pub loss: crate::domain::LossKind,
    /// Lipschitz constant declared for the squared loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squared_lipschitz: Option<f64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_iters")]
    pub batch_max_iters: usize,
    #[serde(default = "default_tol")]
    pub batch_tol: f64,
    #[serde(default)]
    pub batch_solver: crate::inner::BatchSolver,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_mode() -> InnerMode {
    InnerMode::Online
}
fn default_loss() -> crate::domain::LossKind {
    crate::domain::LossKind::Absolute
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}
fn default_iters() -> usize {
    InnerConfig::DEFAULT_MAX_ITERS
}
fn default_tol() -> f64 {
    InnerConfig::DEFAULT_TOL
}
fn default_parallel() -> bool {
    true
}

impl RunConfig {
    pub fn loss(&self) -> Result<Loss> {
        match self.loss {
            crate::domain::LossKind::Absolute => Ok(Loss::absolute()),
            crate::domain::LossKind::Squared => Loss::squared(self.squared_lipschitz.unwrap_or(1.0)).map_err(as_config),
        }
    }

    pub fn inner(&self, lambda: f64) -> Result<InnerConfig> {
        let cfg = InnerConfig {
            lambda,
            mode: self.inner_mode,
            batch_max_iters: self.batch_max_iters,
            batch_tol: self.batch_tol,
            batch_solver: self.batch_solver,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    #[serde(default, rename = "method")]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    pub splits: SplitConfig,
    #[serde(default)]
    pub curve: CurveConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative CSV paths resolve against the
    /// directory containing the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let EnvironmentConfig::Csv { path: data, .. } = &mut cfg.environment {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        self.grid
            .lambda
            .clone()
            .unwrap_or_else(|| self.environment.default_grid())
            .values()
    }

    pub fn gamma_grid(&self) -> Vec<f64> {
        self.grid
            .gamma
            .clone()
            .unwrap_or_else(|| self.environment.default_grid())
            .values()
    }

    /// Configured checkpoints, or 10 log-spaced values in `[10, T_tr]`.
    pub fn checkpoints(&self) -> Vec<usize> {
        if let Some(c) = &self.curve.checkpoints {
            return c.clone();
        }
        let t_tr = self.splits.train;
        if t_tr <= 10 {
            return vec![t_tr];
        }
        let mut out: Vec<usize> = log_space(10.0, t_tr as f64, 10)
            .into_iter()
            .map(|v| (v.round() as usize).clamp(1, t_tr))
            .collect();
        out.dedup();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let lambdas = self.lambda_grid();
        let gammas = self.gamma_grid();
        if lambdas.is_empty() || gammas.is_empty() {
            return bad("lambda and gamma grids must be non-empty".into());
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return bad(format!("lambda candidates must be positive and finite, got {l}"));
        }
        if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return bad(format!("gamma candidates must be non-negative and finite, got {g}"));
        }
        if let GridAxis::LogRange { min, max, .. } = self.grid.lambda.as_ref().unwrap_or(&self.environment.default_grid()) {
            if !(*min > 0.0 && *max >= *min) {
                return bad("log-range grids need 0 < min <= max".into());
            }
        }
        let s = &self.splits;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return bad("every meta split needs at least one task".into());
        }
        if !(s.fraction > 0.0 && s.fraction < 1.0) {
            return bad(format!("within-task fraction must lie in (0, 1), got {}", s.fraction));
        }
        if let Some(total) = self.environment.total_tasks() {
            if s.train + s.val + s.test > total {
                return bad(format!(
                    "splits need {} tasks but the environment has {total}",
                    s.train + s.val + s.test
                ));
            }
        }
        let checkpoints = self.checkpoints();
        if checkpoints.is_empty() || checkpoints.iter().any(|t| *t == 0 || *t > s.train) {
            return bad(format!("checkpoints must lie in [1, {}]", s.train));
        }
        if self.run.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.methods {
            if !names.insert(m.name.as_str()) {
                return bad(format!("duplicate method name '{}'", m.name));
            }
            if m.name.contains(',') || m.name.contains('"') || m.name.contains('\n') {
                return bad(format!("method name '{}' contains a reserved character", m.name));
            }
            match (m.kind, m.feature) {
                (MethodKind::Conditional, None) => {
                    return bad(format!("conditional method '{}' needs a feature", m.name))
                }
                (MethodKind::Conditional, Some(f)) => self.check_feature(&m.name, f)?,
                (_, Some(_)) => return bad(format!("method '{}' takes no feature map", m.name)),
                _ => {}
            }
            if let Some(sigma) = m.rff_sigma {
                if !(sigma > 0.0) {
                    return bad(format!("rff_sigma of '{}' must be positive", m.name));
                }
            }
            if m.rff_k == Some(0) {
                return bad(format!("rff_k of '{}' must be positive", m.name));
            }
        }
        self.run.loss()?;
        self.run.inner(lambdas[0]).map_err(as_config)?;
        self.environment.cluster_spec(0)?;
        self.environment.circle_spec(0)?;
        Ok(())
    }

    fn check_feature(&self, name: &str, feature: FeatureChoice) -> Result<()> {
        let ok = match (&self.environment, feature) {
            (EnvironmentConfig::Clusters { .. }, FeatureChoice::Circle) => false,
            (EnvironmentConfig::Clusters { .. }, FeatureChoice::XyOuter) => false,
            (EnvironmentConfig::Circle { .. }, FeatureChoice::MeanInputs | FeatureChoice::XyOuter) => false,
            (EnvironmentConfig::Csv { schema, .. }, FeatureChoice::XyOuter) => *schema == CsvSchema::Lenk,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "feature {feature:?} of method '{name}' does not fit the environment's side information"
            )))
        }
    }
}
