//! Differentiable loss functions over projection and label matrices.
//!
//! Every loss returns an [`Evaluated`] pair: the scalar [`LossValue`] and the
//! analytic gradient of that scalar with respect to each input entry. Losses
//! are pure functions and are safe to call from any thread.
//!
//! Contrastive losses consume [`ProjectionMatrix`] values, whose rows must be
//! unit-norm. Use [`ProjectionMatrix::normalize`] together with
//! [`normalize_rows_backward`] when the raw (pre-normalization) embeddings are
//! the quantity being differentiated.

mod bce;
mod compose;
mod contrastive;

pub use bce::bce_multilabel;
pub use compose::{compose_loss, TermId, WeightedTerm};
pub use contrastive::{infonce_inter, mulsupcon, ntxent_intra, PairGrad, NO_POSITIVES_FLAG};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows of a [`ProjectionMatrix`] must have unit norm within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("recipe term `{0}` was not computed")]
    MissingTerm(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Softmax temperature shared by all contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.1);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(LossError::Configuration(format!(
                "temperature must be a positive finite number, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = LossError;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// An N x k matrix of unit-norm row embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(Array2<f64>);

impl ProjectionMatrix {
    /// Wraps `rows`, checking that every row is unit-norm and finite.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(LossError::Precondition(format!(
                    "row {i} has norm {norm}, expected 1 +/- {UNIT_NORM_TOLERANCE}"
                )));
            }
        }
        Ok(Self(rows))
    }

    /// L2-normalizes each row of `raw`. Rows with zero norm are rejected.
    pub fn normalize(raw: ArrayView2<f64>) -> Result<Self> {
        let norms = row_norms(raw);
        if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
            return Err(LossError::Precondition(format!(
                "row {i} cannot be normalized (norm {})",
                norms[i]
            )));
        }
        Ok(Self(&raw / &norms.insert_axis(Axis(1))))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Stacks two projection matrices vertically (views `a` then `b`).
    pub fn stack(a: &Self, b: &Self) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(LossError::Configuration(format!(
                "cannot stack projections of width {} and {}",
                a.ncols(),
                b.ncols()
            )));
        }
        let joined = ndarray::concatenate(Axis(0), &[a.view(), b.view()])
            .expect("widths checked above");
        Ok(Self(joined))
    }
}

fn row_norms(m: ArrayView2<f64>) -> Array1<f64> {
    m.outer_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Back-propagates a gradient through row-wise L2 normalization.
///
/// Given raw rows `x`, their normalized form `z = x / |x|` and `dL/dz`,
/// returns `dL/dx = (dL/dz - z (z . dL/dz)) / |x|`.
pub fn normalize_rows_backward(
    raw: ArrayView2<f64>,
    normalized: ArrayView2<f64>,
    grad: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(raw.raw_dim());
    for (((mut o, x), z), g) in out
        .outer_iter_mut()
        .zip(raw.outer_iter())
        .zip(normalized.outer_iter())
        .zip(grad.outer_iter())
    {
        let norm = x.dot(&x).sqrt();
        let proj = z.dot(&g);
        o.assign(&((&g - &(&z * proj)) / norm));
    }
    out
}

/// An N x L binary label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix(Array2<u8>);

impl LabelMatrix {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(v) = labels.iter().find(|v| **v > 1) {
            return Err(LossError::Precondition(format!(
                "label entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Self(labels))
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(LossError::Configuration("ragged label rows".into()));
        }
        let flat: Vec<u8> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), width), flat)
            .map_err(|e| LossError::Configuration(e.to_string()))?;
        Self::new(arr)
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Stacks `self` on top of itself, for losses over two views of a batch.
    pub fn duplicated(&self) -> Self {
        Self(ndarray::concatenate(Axis(0), &[self.0.view(), self.0.view()]).expect("same width"))
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.0
    }
}

/// A scalar loss together with its per-term addends.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(name.to_string(), value);
        Self { total: value, terms }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// A loss value and the gradient of its scalar with respect to the inputs.
#[derive(Debug, Clone)]
pub struct Evaluated<G> {
    pub value: LossValue,
    pub grad: G,
}
