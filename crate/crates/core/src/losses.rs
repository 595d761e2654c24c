//! Batch-mean losses with hand-derived gradients.
//!
//! Every loss returns its value averaged over the batch together with the
//! gradient with respect to the logits, so learning rates stay comparable
//! across batch sizes.
//!
//! Per-entry derivatives used throughout:
//!
//! * `d/dz [-log sigmoid(z)]     = sigmoid(z) - 1`
//! * `d/dz [-log(1 - sigmoid(z))] = sigmoid(z)`
//! * `d/dz_j [-log softmax_y(z)] = softmax_j(z) - [j == y]`

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sigmoid, sigmoid, softmax_rows, LabelVector, LogitMatrix};
use crate::sccp::{propose_candidates, CandidateSetBatch};

/// Batch-mean loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Output of the joint two-head loss.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLossOutput {
    pub value: f64,
    /// Cross-entropy part, on the SCCP head.
    pub ce_value: f64,
    /// Multi-label BCE part, on the ML head.
    pub bce_value: f64,
    pub grad_ml: Array2<f64>,
    pub grad_sccp: Array2<f64>,
    pub candidates: CandidateSetBatch,
}

/// Expected-positive regularization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EprConfig {
    pub beta: f64,
    pub k_target: usize,
}

impl EprConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta = {} must be >= 0", self.beta)));
        }
        if self.k_target == 0 || self.k_target >= classes {
            return Err(Error::InvalidConfig(format!(
                "EPR needs 1 <= K < L, got K = {} with L = {classes}",
                self.k_target
            )));
        }
        Ok(())
    }
}

/// Average-K loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvgKConfig {
    /// Weight of the pseudo-labels relative to the observed labels.
    pub alpha: f64,
    pub k_target: usize,
}

impl AvgKConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha = {} must be >= 0", self.alpha)));
        }
        if self.k_target == 0 || self.k_target >= classes {
            return Err(Error::InvalidConfig(format!(
                "average-K needs 1 <= K < L, got K = {} with L = {classes}",
                self.k_target
            )));
        }
        Ok(())
    }
}

fn check_labels(z: &LogitMatrix, y: &LabelVector) -> Result<()> {
    y.check(z.rows(), z.cols())
}

/// Softmax cross-entropy.
pub fn ce_loss(z: &LogitMatrix, y: &LabelVector) -> Result<LossOutput> {
    check_labels(z, y)?;
    let scale = 1.0 / z.rows() as f64;
    let mut grad = softmax_rows(z).into_inner();
    let mut value = 0.0;
    for (i, (zrow, mut grow)) in z.as_array().rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let label = y.get(i);
        // -log softmax_y = (max - z_y) + log(1 + sum_{k != argmax} e^{z_k - max})
        let (argmax, max) = zrow
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        let rest: f64 = zrow
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != argmax)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        value += (max - zrow[label]) + rest.ln_1p();
        grow[label] -= 1.0;
        grow *= scale;
    }
    Ok(LossOutput {
        value: value * scale,
        grad,
    })
}

/// Single-positive binary cross-entropy ("assume negative"), with the
/// negatives down-weighted by `1 / (L - 1)`.
pub fn an_loss(z: &LogitMatrix, y: &LabelVector) -> Result<LossOutput> {
    check_labels(z, y)?;
    let (rows, cols) = (z.rows(), z.cols());
    let scale = 1.0 / rows as f64;
    let neg_weight = 1.0 / (cols - 1) as f64;
    let mut grad = Array2::zeros((rows, cols));
    let mut value = 0.0;
    for ((i, j), &v) in z.as_array().indexed_iter() {
        if j == y.get(i) {
            value -= log_sigmoid(v);
            grad[[i, j]] = (sigmoid(v) - 1.0) * scale;
        } else {
            value -= neg_weight * log_sigmoid(-v);
            grad[[i, j]] = neg_weight * sigmoid(v) * scale;
        }
    }
    Ok(LossOutput {
        value: value * scale,
        grad,
    })
}

/// Positive-only binary cross-entropy on the observed labels.
pub fn bce_pos_loss(z: &LogitMatrix, y: &LabelVector) -> Result<LossOutput> {
    check_labels(z, y)?;
    let scale = 1.0 / z.rows() as f64;
    let mut grad = Array2::zeros(z.as_array().raw_dim());
    let mut value = 0.0;
    for (i, &label) in y.as_slice().iter().enumerate() {
        let v = z.as_array()[[i, label]];
        value -= log_sigmoid(v);
        grad[[i, label]] = (sigmoid(v) - 1.0) * scale;
    }
    Ok(LossOutput {
        value: value * scale,
        grad,
    })
}

/// Batch estimate of the expected number of positive classes:
/// the mean over rows of the summed sigmoids.
pub fn expected_positives(z: &LogitMatrix) -> f64 {
    z.as_array().iter().map(|&v| sigmoid(v)).sum::<f64>() / z.rows() as f64
}

/// Positive-only BCE plus `beta * (K_hat - K)^2`.
pub fn epr_loss(z: &LogitMatrix, y: &LabelVector, cfg: &EprConfig) -> Result<LossOutput> {
    cfg.validate(z.cols())?;
    let LossOutput { value, mut grad } = bce_pos_loss(z, y)?;
    let gap = expected_positives(z) - cfg.k_target as f64;
    let coupling = 2.0 * cfg.beta * gap / z.rows() as f64;
    grad.zip_mut_with(z.as_array(), |g, &v| {
        let s = sigmoid(v);
        *g += coupling * s * (1.0 - s);
    });
    Ok(LossOutput {
        value: value + cfg.beta * gap * gap,
        grad,
    })
}

/// How the pseudo-positive and pseudo-negative sums are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Normalizer {
    /// `(K - 1)|B|` and `(L - K)|B|`, valid for batch-global proposals.
    Fixed(usize),
    /// The realized number of pseudo-positive / pseudo-negative entries.
    Realized,
}

fn multilabel_bce(
    z: &LogitMatrix,
    y: &LabelVector,
    sc: &CandidateSetBatch,
    alpha: f64,
    norm: Normalizer,
) -> Result<LossOutput> {
    check_labels(z, y)?;
    let (rows, cols) = (z.rows(), z.cols());
    if sc.batch_size() != rows || sc.classes() != cols {
        return Err(Error::Shape(format!(
            "candidate sets for {}x{} do not match logits {rows}x{cols}",
            sc.batch_size(),
            sc.classes()
        )));
    }
    if sc.labels() != y.as_slice() {
        return Err(Error::InconsistentPseudoLabels(
            "candidate sets were built for different labels".into(),
        ));
    }
    let n_pos = sc.total_candidates();
    let n_neg = rows * cols - rows - n_pos;
    let (pos_count, neg_count) = match norm {
        Normalizer::Fixed(k) => {
            let expected = (k - 1) * rows;
            if n_pos != expected {
                return Err(Error::InconsistentPseudoLabels(format!(
                    "{n_pos} candidates in the batch, expected (K-1)|B| = {expected}"
                )));
            }
            ((k - 1) * rows, (cols - k) * rows)
        }
        Normalizer::Realized => (n_pos, n_neg),
    };
    let scale = 1.0 / rows as f64;
    // An empty group contributes nothing.
    let pos_weight = if pos_count == 0 { 0.0 } else { alpha / pos_count as f64 };
    let neg_weight = if neg_count == 0 { 0.0 } else { alpha / neg_count as f64 };

    let mut grad = Array2::zeros((rows, cols));
    let (mut observed, mut pseudo_pos, mut pseudo_neg) = (0.0, 0.0, 0.0);
    for ((i, j), &v) in z.as_array().indexed_iter() {
        if j == y.get(i) {
            observed -= log_sigmoid(v);
            grad[[i, j]] = scale * (sigmoid(v) - 1.0);
        } else if sc.is_candidate(i, j) {
            pseudo_pos -= log_sigmoid(v);
            grad[[i, j]] = pos_weight * (sigmoid(v) - 1.0);
        } else {
            pseudo_neg -= log_sigmoid(-v);
            grad[[i, j]] = neg_weight * sigmoid(v);
        }
    }
    Ok(LossOutput {
        value: scale * observed + pos_weight * pseudo_pos + neg_weight * pseudo_neg,
        grad,
    })
}

/// Multi-label BCE of the ML head against the observed labels plus
/// candidate pseudo-labels, with normalizers `1/|B|`, `alpha/((K-1)|B|)` and
/// `alpha/((L-K)|B|)`.
///
/// The candidate sets are constants for differentiation. With `K = 1` the
/// pseudo-positive term is empty and contributes exactly zero.
pub fn bce_multilabel_loss(
    z: &LogitMatrix,
    y: &LabelVector,
    sc: &CandidateSetBatch,
    cfg: &AvgKConfig,
) -> Result<LossOutput> {
    cfg.validate(z.cols())?;
    multilabel_bce(z, y, sc, cfg.alpha, Normalizer::Fixed(cfg.k_target))
}

/// Same as [`bce_multilabel_loss`] but each pseudo-label group is normalized
/// by its realized entry count, for candidate sets of arbitrary sizes.
pub fn bce_multilabel_loss_realized(
    z: &LogitMatrix,
    y: &LabelVector,
    sc: &CandidateSetBatch,
    alpha: f64,
) -> Result<LossOutput> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} must be >= 0")));
    }
    multilabel_bce(z, y, sc, alpha, Normalizer::Realized)
}

/// Joint average-K loss: cross-entropy on the SCCP head plus the multi-label
/// BCE on the ML head, with candidates proposed from the SCCP head.
pub fn avgk_loss(
    z_ml: &LogitMatrix,
    z_sccp: &LogitMatrix,
    y: &LabelVector,
    cfg: &AvgKConfig,
) -> Result<JointLossOutput> {
    let candidates = propose_candidates(z_sccp, y, cfg.k_target)?;
    avgk_loss_with_candidates(z_ml, z_sccp, y, candidates, cfg)
}

/// [`avgk_loss`] with the candidate sets supplied by the caller.
pub fn avgk_loss_with_candidates(
    z_ml: &LogitMatrix,
    z_sccp: &LogitMatrix,
    y: &LabelVector,
    candidates: CandidateSetBatch,
    cfg: &AvgKConfig,
) -> Result<JointLossOutput> {
    if z_ml.as_array().dim() != z_sccp.as_array().dim() {
        return Err(Error::Shape(format!(
            "ML head logits {:?} and SCCP head logits {:?} differ",
            z_ml.as_array().dim(),
            z_sccp.as_array().dim()
        )));
    }
    let ce = ce_loss(z_sccp, y)?;
    let bce = bce_multilabel_loss(z_ml, y, &candidates, cfg)?;
    Ok(JointLossOutput {
        value: ce.value + bce.value,
        ce_value: ce.value,
        bce_value: bce.value,
        grad_ml: bce.grad,
        grad_sccp: ce.grad,
        candidates,
    })
}
