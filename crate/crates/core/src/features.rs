//! Feature maps `phi` on side information.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, SideInfo, TaskInstance};
use crate::error::{check_dim, Error, Result};

/// Which construction a [`FeatureMap`] uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// `k = 0`: the unconditional family.
    Zero,
    /// Mean of the input collection; `k = d`.
    MeanInputs { d: usize },
    /// Mean of `vec(x_i (y_i, 1)^T)` over a datapoint collection; `k = 2d`.
    XyOuter { d: usize },
    /// `(cos 2 pi s, sin 2 pi s)` on a scalar in `[0, 1]`.
    Circle,
    /// Random Fourier features `sqrt(2/k) cos(U x + v)`, averaged over a
    /// collection. Scalars are treated as 1-dimensional inputs.
    Rff {
        /// `None` when `U` and `v` were supplied directly.
        sigma: Option<f64>,
        seed: Option<u64>,
        u: DMatrix<f64>,
        v: DVector<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    k: usize,
    bound_k: f64,
}

impl FeatureMap {
    pub fn zero() -> Self {
        Self {
            kind: FeatureKind::Zero,
            k: 0,
            bound_k: 0.0,
        }
    }

    /// The bound starts at infinity; see [`FeatureMap::with_empirical_bound`].
    pub fn mean_inputs(d: usize) -> Self {
        Self {
            kind: FeatureKind::MeanInputs { d },
            k: d,
            bound_k: f64::INFINITY,
        }
    }

    pub fn xy_outer(d: usize) -> Self {
        Self {
            kind: FeatureKind::XyOuter { d },
            k: 2 * d,
            bound_k: f64::INFINITY,
        }
    }

    pub fn circle() -> Self {
        Self {
            kind: FeatureKind::Circle,
            k: 2,
            bound_k: 1.0,
        }
    }

    /// Random Fourier features for the Gaussian kernel: `v` uniform on
    /// `[0, 2 pi]^k`, entries of `U` i.i.d. `N(0, sigma^2)`.
    pub fn rff(k: usize, sigma: f64, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::invalid("random features need k >= 1 and d >= 1"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("random feature sigma must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let u = DMatrix::from_fn(k, d, |_, _| normal.sample(&mut rng));
        let v = DVector::from_fn(k, |_, _| rng.random_range(0.0..2.0 * PI));
        Ok(Self {
            kind: FeatureKind::Rff {
                sigma: Some(sigma),
                seed: Some(seed),
                u,
                v,
            },
            k,
            bound_k: 2f64.sqrt(),
        })
    }

    /// Random features with explicit `U` and `v`.
    pub fn rff_from_parts(u: DMatrix<f64>, v: DVector<f64>) -> Result<Self> {
        check_dim("rff offsets", u.nrows(), v.len())?;
        if u.nrows() == 0 || u.ncols() == 0 {
            return Err(Error::invalid("random features need k >= 1 and d >= 1"));
        }
        Ok(Self {
            k: u.nrows(),
            kind: FeatureKind::Rff {
                sigma: None,
                seed: None,
                u,
                v,
            },
            bound_k: 2f64.sqrt(),
        })
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bound_k(&self) -> f64 {
        self.bound_k
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FeatureKind::Zero => "zero",
            FeatureKind::MeanInputs { .. } => "mean_inputs",
            FeatureKind::XyOuter { .. } => "xy_outer",
            FeatureKind::Circle => "circle",
            FeatureKind::Rff { .. } => "rff",
        }
    }

    /// Replaces the bound by the largest feature norm observed on `tasks`.
    /// Only meaningful for the maps whose inputs are unbounded.
    pub fn with_empirical_bound(mut self, tasks: &[TaskInstance]) -> Result<Self> {
        if matches!(self.kind, FeatureKind::MeanInputs { .. } | FeatureKind::XyOuter { .. }) {
            let mut bound: f64 = 0.0;
            for task in tasks {
                bound = bound.max(self.apply(task.side())?.norm());
            }
            self.bound_k = bound;
        }
        Ok(self)
    }

    pub fn apply(&self, side: &SideInfo) -> Result<DVector<f64>> {
        match &self.kind {
            FeatureKind::Zero => Ok(DVector::zeros(0)),
            FeatureKind::MeanInputs { d } => match side {
                SideInfo::Inputs(x) => {
                    check_dim("mean_inputs side", *d, x.nrows())?;
                    phi_mean_inputs(x)
                }
                SideInfo::Datapoints(z) => {
                    check_dim("mean_inputs side", *d, z.d())?;
                    phi_mean_inputs(z.inputs())
                }
                SideInfo::Scalar(_) => Err(Error::SideInfoKind("mean_inputs")),
            },
            FeatureKind::XyOuter { d } => match side {
                SideInfo::Datapoints(z) => {
                    check_dim("xy_outer side", *d, z.d())?;
                    phi_xy_outer(z)
                }
                _ => Err(Error::SideInfoKind("xy_outer")),
            },
            FeatureKind::Circle => match side {
                SideInfo::Scalar(s) => phi_circle(*s),
                _ => Err(Error::SideInfoKind("circle")),
            },
            FeatureKind::Rff { u, v, .. } => match side {
                SideInfo::Scalar(s) => {
                    check_dim("rff side", u.ncols(), 1)?;
                    Ok(rff_point(u, v, &DVector::from_element(1, *s)))
                }
                SideInfo::Inputs(x) => rff_mean(u, v, x),
                SideInfo::Datapoints(z) => rff_mean(u, v, z.inputs()),
            },
        }
    }
}

/// `(1/n) sum_i x_i` over a column-wise collection.
pub fn phi_mean_inputs(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() == 0 {
        return Err(Error::EmptySideInfo);
    }
    Ok(x.column_mean())
}

/// Mean of `vec(x_i (y_i, 1)^T)`: the `x_i y_i` column first, then `x_i`.
pub fn phi_xy_outer(z: &Dataset) -> Result<DVector<f64>> {
    if z.is_empty() {
        return Err(Error::EmptySideInfo);
    }
    let d = z.d();
    let n = z.n() as f64;
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&((z.inputs() * z.outputs()) / n));
    out.rows_mut(d, d).copy_from(&z.inputs().column_mean());
    Ok(out)
}

pub fn phi_circle(s: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Range {
            value: s,
            range: "[0, 1]",
        });
    }
    let angle = 2.0 * PI * s;
    Ok(DVector::from_vec(vec![angle.cos(), angle.sin()]))
}

fn rff_point(u: &DMatrix<f64>, v: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let scale = (2.0 / u.nrows() as f64).sqrt();
    (u * x + v).map(|a| scale * a.cos())
}

fn rff_mean(u: &DMatrix<f64>, v: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() == 0 {
        return Err(Error::EmptySideInfo);
    }
    check_dim("rff side", u.ncols(), x.nrows())?;
    let scale = (2.0 / u.nrows() as f64).sqrt();
    let mut proj = u * x;
    for mut col in proj.column_iter_mut() {
        col += v;
        col.apply(|a| *a = scale * a.cos());
    }
    Ok(proj.column_mean())
}
