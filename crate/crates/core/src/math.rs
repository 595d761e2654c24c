//! Numerically stable primitives shared by the losses and the calibration
//! routine: row softmax, sigmoid, log-sigmoid and order statistics.
//!
//! Everything here works in `f64`.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Raw scores for a batch: one row per example, one column per class.
///
/// Entries are always finite, there is at least one row and at least two
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Array2<f64>);

impl LogitMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows == 0 {
            return Err(Error::InvalidInput("logit matrix has no rows".into()));
        }
        if cols < 2 {
            return Err(Error::InvalidInput(format!(
                "logit matrix needs at least 2 classes, got {cols}"
            )));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit ({i}, {j}) = {v}")));
        }
        Ok(Self(values))
    }

    /// Builds a matrix from row vectors, rejecting ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Probabilities with the same layout as a [`LogitMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    /// Wraps an existing matrix of probabilities; every entry must lie in `[0, 1]`.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput("empty probability matrix".into()));
        }
        if let Some(((i, j), v)) = values
            .indexed_iter()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidInput(format!(
                "probability ({i}, {j}) = {v} is outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    /// Stacks row blocks vertically, preserving their order.
    pub fn concat(blocks: &[ProbMatrix]) -> Result<Self> {
        let views: Vec<_> = blocks.iter().map(|b| b.0.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot stack probability blocks: {e}")))?;
        Ok(Self(stacked))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Observed labels of a batch, zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Checks the labels against a batch of `rows` examples over `classes` classes.
    pub fn check(&self, rows: usize, classes: usize) -> Result<()> {
        if self.0.len() != rows {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {rows} rows",
                self.0.len()
            )));
        }
        match self.0.iter().enumerate().find(|(_, &y)| y >= classes) {
            Some((row, &label)) => Err(Error::InvalidLabel {
                row,
                label,
                classes,
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for LabelVector {
    fn from(labels: Vec<usize>) -> Self {
        Self(labels)
    }
}

fn rows_to_array<R: AsRef<[f64]>>(rows: &[R]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, |r| r.as_ref().len());
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != cols {
            return Err(Error::Shape(format!(
                "row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(z: &LogitMatrix) -> ProbMatrix {
    let mut out = z.0.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    ProbMatrix(out)
}

/// Softmax of arbitrary scores, rejecting non-finite input.
pub fn softmax_array(z: &Array2<f64>) -> Result<ProbMatrix> {
    Ok(softmax_rows(&LogitMatrix::new(z.clone())?))
}

/// Logistic function `1 / (1 + e^{-t})`, evaluated without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(t))`; stays finite for large negative `t` and strictly
/// negative for large positive `t`.
pub fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

/// Total order used for descending selection; NaN never reaches it because
/// callers validate their inputs.
fn descending(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

/// The `k`-th largest value of `values` (1-based, duplicates counted).
pub fn kth_largest(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} is outside 1..={}",
            values.len()
        )));
    }
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, descending);
    Ok(*kth)
}

/// The `k`-th and `(k+1)`-th largest values in one selection pass.
pub fn kth_and_next_largest(values: &[f64], k: usize) -> Result<(f64, f64)> {
    if k == 0 || k >= values.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < {} for a (k, k+1) order-statistic pair, got k = {k}",
            values.len()
        )));
    }
    let mut scratch = values.to_vec();
    let (_, kth, rest) = scratch.select_nth_unstable_by(k - 1, descending);
    let kth = *kth;
    let next = rest
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((kth, next))
}
