//! Domain types shared by every other module: datasets, losses, side
//! information, task instances and the linear conditioning function
//! `tau(s) = M * phi(s) + b`.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A finite sample `(x_i, y_i)` of one task.
///
/// Inputs are stored column-wise: column `i` of `inputs` is `x_i`, so the
/// matrix is `d x n`. A dataset with `n == 0` only appears as the held-out
/// split of a meta-training task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyData);
        }
        check_dim("dataset outputs", inputs.len(), outputs.len())?;
        let d = inputs[0].len();
        if d == 0 {
            return Err(Error::invalid("input dimension must be at least 1"));
        }
        for x in &inputs {
            check_dim("dataset inputs", d, x.len())?;
        }
        let matrix = DMatrix::from_columns(&inputs);
        Self::from_columns(matrix, DVector::from_vec(outputs))
    }

    /// Builds a dataset from a `d x n` input matrix and `n` outputs.
    pub fn from_columns(inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(Error::EmptyData);
        }
        if inputs.nrows() == 0 {
            return Err(Error::invalid("input dimension must be at least 1"));
        }
        check_dim("dataset outputs", inputs.ncols(), outputs.len())?;
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(d, 0),
            outputs: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    pub fn d(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn input(&self, i: usize) -> DVectorView<'_, f64> {
        self.inputs.column(i)
    }

    pub fn output(&self, i: usize) -> f64 {
        self.outputs[i]
    }

    /// The `d x n` matrix whose columns are the inputs.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    /// `max_i ||x_i||`, the empirical input radius.
    pub fn input_bound(&self) -> f64 {
        self.inputs
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// The datapoints at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        if indices.is_empty() {
            return Self::empty(self.d());
        }
        Self {
            inputs: self.inputs.select_columns(indices),
            outputs: self.outputs.select_rows(indices),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Absolute,
    /// `(pred - y)^2 / 2`
    Squared,
}

/// A convex loss `l(pred, y)` with a Lipschitz constant valid on the data
/// it is used with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    kind: LossKind,
    lipschitz: f64,
}

impl Loss {
    pub fn absolute() -> Self {
        Self {
            kind: LossKind::Absolute,
            lipschitz: 1.0,
        }
    }

    /// Squared loss; `lipschitz` must bound `|pred - y|` on the data range
    /// the loss is going to see.
    pub fn squared(lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0) {
            return Err(Error::invalid("squared-loss Lipschitz bound must be positive"));
        }
        Ok(Self {
            kind: LossKind::Squared,
            lipschitz,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn value(&self, pred: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Absolute => (pred - y).abs(),
            LossKind::Squared => 0.5 * (pred - y) * (pred - y),
        }
    }

    /// An element of the subdifferential of `l(., y)` at `pred`. Ties of the
    /// absolute loss resolve to the minimal-norm element, 0.
    pub fn subgradient(&self, pred: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Absolute => {
                if pred > y {
                    1.0
                } else if pred < y {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Squared => pred - y,
        }
    }
}

/// Empirical risk `(1/n) sum_i l(<x_i, w>, y_i)`.
pub fn loss_eval(loss: &Loss, w: &DVector<f64>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    check_dim("loss_eval weights", data.d(), w.len())?;
    let preds = data.inputs().tr_mul(w);
    let total: f64 = preds
        .iter()
        .zip(data.outputs().iter())
        .map(|(&p, &y)| loss.value(p, y))
        .sum();
    Ok(total / data.n() as f64)
}

/// Side information attached to a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SideInfo {
    /// A scalar descriptor in `[0, 1]`.
    Scalar(f64),
    /// A collection of inputs, stored column-wise (`d x n`).
    Inputs(DMatrix<f64>),
    /// A collection of datapoints.
    Datapoints(Dataset),
}

impl SideInfo {
    pub fn inputs(points: DMatrix<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::EmptySideInfo);
        }
        Ok(SideInfo::Inputs(points))
    }

    pub fn datapoints(data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySideInfo);
        }
        Ok(SideInfo::Datapoints(data))
    }
}

/// How a task's side information is obtained. Collection-valued side
/// information is always rebuilt from the training split of the task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SideSource {
    Scalar(f64),
    TrainInputs,
    TrainDatapoints,
}

impl SideSource {
    fn derive(&self, train: &Dataset) -> Result<SideInfo> {
        match *self {
            SideSource::Scalar(s) => Ok(SideInfo::Scalar(s)),
            SideSource::TrainInputs => SideInfo::inputs(train.inputs().clone()),
            SideSource::TrainDatapoints => SideInfo::datapoints(train.clone()),
        }
    }
}

/// One task: a training split, a (possibly empty) test split, side
/// information and, for synthetic environments, the target vector `w_mu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    train: Dataset,
    test: Dataset,
    source: SideSource,
    side: SideInfo,
    target: Option<DVector<f64>>,
}

impl TaskInstance {
    pub fn new(
        train: Dataset,
        test: Dataset,
        source: SideSource,
        target: Option<DVector<f64>>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyData);
        }
        if !test.is_empty() {
            check_dim("task test split", train.d(), test.d())?;
        }
        if let Some(t) = &target {
            check_dim("task target", train.d(), t.len())?;
        }
        let side = source.derive(&train)?;
        Ok(Self {
            train,
            test,
            source,
            side,
            target,
        })
    }

    /// The same task with a new train/test split; side information is
    /// recomputed from the new training split.
    pub fn resplit(&self, train: Dataset, test: Dataset) -> Result<Self> {
        Self::new(train, test, self.source, self.target.clone())
    }

    /// The same task with its held-out split dropped.
    pub fn train_only(&self) -> Self {
        Self {
            test: Dataset::empty(self.d()),
            ..self.clone()
        }
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn side(&self) -> &SideInfo {
        &self.side
    }

    pub fn source(&self) -> SideSource {
        self.source
    }

    pub fn target(&self) -> Option<&DVector<f64>> {
        self.target.as_ref()
    }

    pub fn d(&self) -> usize {
        self.train.d()
    }

    /// All datapoints of the task, training split first.
    pub fn all_data(&self) -> Dataset {
        if self.test.is_empty() {
            return self.train.clone();
        }
        let d = self.d();
        let n = self.train.n() + self.test.n();
        let mut inputs = DMatrix::zeros(d, n);
        inputs
            .columns_mut(0, self.train.n())
            .copy_from(self.train.inputs());
        inputs
            .columns_mut(self.train.n(), self.test.n())
            .copy_from(self.test.inputs());
        let outputs = DVector::from_iterator(
            n,
            self.train
                .outputs()
                .iter()
                .chain(self.test.outputs().iter())
                .copied(),
        );
        Dataset { inputs, outputs }
    }
}

/// Parameters `(M, b)` of the linear conditioning function
/// `tau(s) = M * phi(s) + b`. `k == 0` is the unconditional family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningParams {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ConditioningParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        Self {
            m: DMatrix::zeros(d, k),
            b: DVector::zeros(d),
        }
    }

    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_dim("conditioning bias", m.nrows(), b.len())?;
        Ok(Self { m, b })
    }

    pub fn d(&self) -> usize {
        self.b.len()
    }

    pub fn k(&self) -> usize {
        self.m.ncols()
    }

    /// `||M||_F^2 + ||b||^2`
    pub fn frobenius_norm_squared(&self) -> f64 {
        self.m.norm_squared() + self.b.norm_squared()
    }

    pub fn apply(&self, phi_s: &DVector<f64>) -> Result<DVector<f64>> {
        apply_tau(self, phi_s)
    }
}

/// `M * phi_s + b`.
pub fn apply_tau(params: &ConditioningParams, phi_s: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("apply_tau features", params.k(), phi_s.len())?;
    if params.k() == 0 {
        return Ok(params.b.clone());
    }
    Ok(&params.m * phi_s + &params.b)
}

/// Anything that maps side information to a bias vector.
pub trait ConditioningFunction {
    fn bias(&self, side: &SideInfo) -> Result<DVector<f64>>;
}

/// `tau(s) = theta` for every `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantBias(pub DVector<f64>);

impl ConditioningFunction for ConstantBias {
    fn bias(&self, _side: &SideInfo) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

impl<F> ConditioningFunction for F
where
    F: Fn(&SideInfo) -> Result<DVector<f64>>,
{
    fn bias(&self, side: &SideInfo) -> Result<DVector<f64>> {
        self(side)
    }
}
