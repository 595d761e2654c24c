//! Candidate-class proposal from the SCCP head.
//!
//! The SCCP head's softmax output is masked at the observed labels, then the
//! `(K - 1) * |B|` largest remaining entries of the whole batch become
//! pseudo-positives. Selection is batch-global, so per-example set sizes vary
//! while the batch mean of `|S(x_i)|` is exactly `K`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::math::{softmax_rows, LabelVector, LogitMatrix, ProbMatrix};

/// SCCP probabilities with the observed label of each row replaced by an
/// unselectable marker (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedProbMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Option<f64>>,
}

impl MaskedProbMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `None` marks the observed label.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.cols + j]
    }

    /// Selectable entries as `(row, col, value)` in row-major order.
    pub fn selectable(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(move |(idx, v)| v.map(|v| (idx / self.cols, idx % self.cols, v)))
    }
}

/// Replaces entry `(i, y_i)` of `p_sccp` with the unselectable marker.
pub fn mask_true_labels(p_sccp: &ProbMatrix, y: &LabelVector) -> Result<MaskedProbMatrix> {
    let (rows, cols) = (p_sccp.rows(), p_sccp.cols());
    y.check(rows, cols)?;
    let mut entries: Vec<Option<f64>> = p_sccp.as_array().iter().copied().map(Some).collect();
    for (i, &label) in y.as_slice().iter().enumerate() {
        entries[i * cols + label] = None;
    }
    Ok(MaskedProbMatrix {
        rows,
        cols,
        entries,
    })
}

/// Per-example candidate sets `S_c(x_i)` (observed label excluded) for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSetBatch {
    classes: usize,
    labels: Vec<usize>,
    // sorted ascending per row
    candidates: Vec<Vec<usize>>,
}

impl CandidateSetBatch {
    /// Builds a batch from externally supplied sets.
    ///
    /// Fails if a set contains its row's observed label or an out-of-range class.
    pub fn from_sets(sets: Vec<Vec<usize>>, y: &LabelVector, classes: usize) -> Result<Self> {
        y.check(sets.len(), classes)?;
        let mut candidates = Vec::with_capacity(sets.len());
        for (i, mut set) in sets.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&j| j >= classes) {
                return Err(Error::InvalidLabel {
                    row: i,
                    label: bad,
                    classes,
                });
            }
            if set.binary_search(&y.get(i)).is_ok() {
                return Err(Error::InconsistentPseudoLabels(format!(
                    "candidate set of row {i} contains its observed label {}",
                    y.get(i)
                )));
            }
            candidates.push(set);
        }
        Ok(Self {
            classes,
            labels: y.as_slice().to_vec(),
            candidates,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `S_c(x_i)`, sorted ascending.
    pub fn candidates(&self, i: usize) -> &[usize] {
        &self.candidates[i]
    }

    pub fn is_candidate(&self, i: usize, j: usize) -> bool {
        self.candidates[i].binary_search(&j).is_ok()
    }

    /// Whether `j` belongs to the full set `S(x_i) = S_c(x_i) ∪ {y_i}`.
    pub fn in_full_set(&self, i: usize, j: usize) -> bool {
        j == self.labels[i] || self.is_candidate(i, j)
    }

    /// `S(x_i)`, sorted ascending.
    pub fn full_set(&self, i: usize) -> Vec<usize> {
        let mut set = self.candidates[i].clone();
        let pos = set.binary_search(&self.labels[i]).unwrap_err();
        set.insert(pos, self.labels[i]);
        set
    }

    pub fn total_candidates(&self) -> usize {
        self.candidates.iter().map(Vec::len).sum()
    }

    /// Mean of `|S(x_i)|` over the batch.
    pub fn mean_set_size(&self) -> f64 {
        (self.total_candidates() + self.batch_size()) as f64 / self.batch_size() as f64
    }

    /// Reorders rows so that row `r` of the result is row `order[r]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            classes: self.classes,
            labels: order.iter().map(|&r| self.labels[r]).collect(),
            candidates: order.iter().map(|&r| self.candidates[r].clone()).collect(),
        }
    }
}

/// Larger values first, ties broken by (row, column) ascending.
fn selection_order(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    b.2.total_cmp(&a.2)
        .then(a.0.cmp(&b.0))
        .then(a.1.cmp(&b.1))
}

/// Selects the top `(K - 1) * |B|` masked SCCP probabilities of the batch.
pub fn propose_from_masked(masked: &MaskedProbMatrix, y: &LabelVector, k_target: usize) -> Result<CandidateSetBatch> {
    let (rows, cols) = (masked.rows(), masked.cols());
    if k_target == 0 || k_target >= cols {
        return Err(Error::InvalidConfig(format!(
            "K = {k_target} must satisfy 1 <= K <= L - 1 = {}",
            cols - 1
        )));
    }
    let budget = (k_target - 1) * rows;
    let mut sets = vec![Vec::new(); rows];
    if budget > 0 {
        let mut pool: Vec<(usize, usize, f64)> = masked.selectable().collect();
        if budget < pool.len() {
            pool.select_nth_unstable_by(budget - 1, selection_order);
            pool.truncate(budget);
        }
        for (i, j, _) in pool {
            sets[i].push(j);
        }
    }
    CandidateSetBatch::from_sets(sets, y, cols)
}

/// Proposes candidate sets from SCCP-head logits.
pub fn propose_candidates(z_sccp: &LogitMatrix, y: &LabelVector, k_target: usize) -> Result<CandidateSetBatch> {
    y.check(z_sccp.rows(), z_sccp.cols())?;
    let masked = mask_true_labels(&softmax_rows(z_sccp), y)?;
    propose_from_masked(&masked, y, k_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn figure_batch() -> (MaskedProbMatrix, LabelVector) {
        let y = LabelVector::new(vec![0, 1, 2]);
        let p = ProbMatrix::from_rows(&[
            [0.70, 0.12, 0.10, 0.08],
            [0.25, 0.50, 0.15, 0.10],
            [0.05, 0.35, 0.40, 0.20],
        ])
        .unwrap();
        (mask_true_labels(&p, &y).unwrap(), y)
    }

    #[test]
    fn masking_replaces_only_the_label_entry() {
        let p = ProbMatrix::from_rows(&[[0.7, 0.3]]).unwrap();
        let m = mask_true_labels(&p, &LabelVector::new(vec![0])).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1)), (None, Some(0.3)));

        let p = ProbMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let m = mask_true_labels(&p, &LabelVector::new(vec![1])).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1)), (Some(0.5), None));

        let (m, y) = figure_batch();
        let original: [[f64; 4]; 3] = [
            [0.70, 0.12, 0.10, 0.08],
            [0.25, 0.50, 0.15, 0.10],
            [0.05, 0.35, 0.40, 0.20],
        ];
        for (i, row) in original.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if j != y.get(i) {
                    assert_eq!(m.get(i, j).unwrap().to_bits(), v.to_bits());
                }
            }
        }
    }

    #[test]
    fn masking_rejects_bad_labels() {
        let p = ProbMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!(matches!(
            mask_true_labels(&p, &LabelVector::new(vec![2])),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn batch_global_selection_matches_hand_sort() {
        // Selectable values sorted: .35 .25 .20 .15 .12 .10 .10 .08 .05
        let (m, y) = figure_batch();
        let sc = propose_from_masked(&m, &y, 2).unwrap();
        assert_eq!(sc.candidates(0), &[] as &[usize]);
        assert_eq!(sc.candidates(1), &[0]);
        assert_eq!(sc.candidates(2), &[1, 3]);
        let sizes: Vec<usize> = (0..3).map(|i| sc.full_set(i).len()).collect();
        assert_eq!(sizes, vec![1, 2, 3]);
        assert_eq!(sc.mean_set_size(), 2.0);
    }

    #[test]
    fn k_one_selects_nothing() {
        let (m, y) = figure_batch();
        let sc = propose_from_masked(&m, &y, 1).unwrap();
        assert_eq!(sc.total_candidates(), 0);
    }

    #[test]
    fn single_example_batch_gets_exactly_k_minus_one() {
        let z = LogitMatrix::from_rows(&[[0.3, -1.0, 2.0, 0.1, 0.0, 1.5]]).unwrap();
        let y = LabelVector::new(vec![2]);
        for k in 1..6 {
            let sc = propose_candidates(&z, &y, k).unwrap();
            assert_eq!(sc.candidates(0).len(), k - 1);
        }
    }

    #[test]
    fn invalid_k_is_rejected() {
        let z = LogitMatrix::zeros(2, 4).unwrap();
        let y = LabelVector::new(vec![0, 1]);
        assert!(matches!(
            propose_candidates(&z, &y, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            propose_candidates(&z, &y, 4),
            Err(Error::InvalidConfig(_))
        ));
        assert!(propose_candidates(&z, &y, 3).is_ok());
    }

    #[test]
    fn ties_resolve_by_row_then_column() {
        let z = LogitMatrix::zeros(2, 3).unwrap();
        let y = LabelVector::new(vec![0, 0]);
        let sc = propose_candidates(&z, &y, 2).unwrap();
        assert_eq!(sc.candidates(0), &[1, 2]);
        assert_eq!(sc.candidates(1), &[] as &[usize]);
    }

    #[test]
    fn external_sets_are_validated() {
        let y = LabelVector::new(vec![0, 1]);
        assert!(matches!(
            CandidateSetBatch::from_sets(vec![vec![0], vec![]], &y, 3),
            Err(Error::InconsistentPseudoLabels(_))
        ));
        assert!(matches!(
            CandidateSetBatch::from_sets(vec![vec![3], vec![]], &y, 3),
            Err(Error::InvalidLabel { .. })
        ));
        let sc = CandidateSetBatch::from_sets(vec![vec![2, 1], vec![2]], &y, 3).unwrap();
        assert_eq!(sc.full_set(0), vec![0, 1, 2]);
        assert_eq!(sc.full_set(1), vec![1, 2]);
        assert!(sc.in_full_set(1, 1) && !sc.in_full_set(1, 0));
    }

    proptest! {
        #[test]
        fn shift_invariance(
            (rows, labels) in (1usize..6).prop_flat_map(|b| (
                prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 5), b),
                prop::collection::vec(0usize..5, b),
            )),
            shifts in prop::collection::vec(-20.0f64..20.0, 6),
            k in 1usize..5,
        ) {
            let z = LogitMatrix::from_rows(&rows).unwrap();
            let mut shifted = z.as_array().clone();
            for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
                row += shifts[i];
            }
            let y = LabelVector::new(labels);
            let a = propose_candidates(&z, &y, k).unwrap();
            let b = propose_candidates(&LogitMatrix::new(shifted).unwrap(), &y, k);
            // Shifting can perturb the last bits of the softmax; compare only
            // when no near-tie sits at the selection boundary.
            let p = softmax_rows(&z);
            let m = mask_true_labels(&p, &y).unwrap();
            let mut vals: Vec<f64> = m.selectable().map(|t| t.2).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            let budget = (k - 1) * z.rows();
            let clear = budget == 0 || budget >= vals.len() || vals[budget - 1] - vals[budget] > 1e-9;
            if clear {
                prop_assert_eq!(a, b.unwrap());
            }
        }
    }

    #[test]
    fn zero_matrix_is_valid_input() {
        let z = LogitMatrix::new(Array2::zeros((3, 4))).unwrap();
        let y = LabelVector::new(vec![3, 2, 1]);
        let sc = propose_candidates(&z, &y, 3).unwrap();
        assert_eq!(sc.total_candidates(), 6);
    }
}
