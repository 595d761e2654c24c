use avgk_core::calibration::{
    avg_k_accuracy, calibrate, evaluate_sets, predict_sets, FrequencyGroups, Group,
};
use avgk_core::losses::{an_loss, bce_multilabel_loss, bce_pos_loss, epr_loss, AvgKConfig, EprConfig};
use avgk_core::math::{softmax_rows, LabelVector, LogitMatrix, ProbMatrix};
use avgk_core::sccp::{mask_true_labels, propose_candidates, CandidateSetBatch};
use ndarray::Array2;
use proptest::prelude::*;

/// Logits of shape (b, l) with labels and a target size `1 <= k < l`.
fn batch() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, usize)> {
    (1usize..9, 2usize..11).prop_flat_map(|(b, l)| {
        (
            prop::collection::vec(-6.0f64..6.0, b * l),
            prop::collection::vec(0..l, b),
            1..l,
        )
            .prop_map(move |(v, y, k)| (Array2::from_shape_vec((b, l), v).unwrap(), y, k))
    })
}

fn lm(z: &Array2<f64>) -> LogitMatrix {
    LogitMatrix::new(z.clone()).unwrap()
}

fn probs_and_labels() -> impl Strategy<Value = (ProbMatrix, Vec<usize>, usize)> {
    (2usize..40, 2usize..8).prop_flat_map(|(n, l)| {
        (prop::collection::vec(-4.0f64..4.0, n * l), prop::collection::vec(0..l, n), 1..l).prop_map(
            move |(v, y, k)| {
                let z = LogitMatrix::new(Array2::from_shape_vec((n, l), v).unwrap()).unwrap();
                (softmax_rows(&z), y, k)
            },
        )
    })
}

proptest! {
    #[test]
    fn sccp_set_size_identity_and_label_exclusion((z, y, k) in batch()) {
        let y = LabelVector::new(y);
        let sc = propose_candidates(&lm(&z), &y, k).unwrap();
        prop_assert_eq!(sc.total_candidates(), (k - 1) * z.nrows());
        for i in 0..z.nrows() {
            prop_assert!(!sc.is_candidate(i, y.get(i)));
            prop_assert!(sc.candidates(i).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn sccp_selected_entries_dominate((z, y, k) in batch()) {
        let y = LabelVector::new(y);
        let p = softmax_rows(&lm(&z));
        let masked = mask_true_labels(&p, &y).unwrap();
        let sc = propose_candidates(&lm(&z), &y, k).unwrap();
        let chosen: Vec<f64> = masked.selectable().filter(|&(i, j, _)| sc.is_candidate(i, j)).map(|e| e.2).collect();
        let rest: Vec<f64> = masked.selectable().filter(|&(i, j, _)| !sc.is_candidate(i, j)).map(|e| e.2).collect();
        let min_chosen = chosen.iter().copied().fold(f64::INFINITY, f64::min);
        let max_rest = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(chosen.is_empty() || rest.is_empty() || min_chosen >= max_rest);
    }

    #[test]
    fn sccp_permutation_equivariant((z, y, k) in batch(), seed in any::<u64>()) {
        let b = z.nrows();
        let mut order: Vec<usize> = (0..b).collect();
        // Deterministic shuffle from the seed.
        for i in (1..b).rev() {
            order.swap(i, (seed as usize ^ (i * 2654435761)) % (i + 1));
        }
        let yv = LabelVector::new(y.clone());
        let base = propose_candidates(&lm(&z), &yv, k).unwrap();
        let zp = z.select(ndarray::Axis(0), &order);
        let yp = LabelVector::new(order.iter().map(|&r| y[r]).collect());
        let perm = propose_candidates(&lm(&zp), &yp, k).unwrap();
        // Continuous random logits make ties practically impossible.
        prop_assert_eq!(perm, base.permuted(&order));
    }

    #[test]
    fn calibration_matches_sorting_oracle((p, _y, k) in probs_and_labels()) {
        let n = p.rows();
        prop_assume!(k * n < n * p.cols());
        let mut flat: Vec<f64> = p.as_array().iter().copied().collect();
        flat.sort_by(|a, b| b.total_cmp(a));
        let expected = 0.5 * (flat[k * n - 1] + flat[k * n]);
        let thr = calibrate(&p, k).unwrap();
        prop_assert_eq!(thr.lambda(), expected);
        if thr.has_strict_gap() {
            prop_assert_eq!(predict_sets(&p, thr.lambda()).mean_size(), k as f64);
        }
    }

    #[test]
    fn sets_and_accuracy_monotone_in_lambda((p, y, _k) in probs_and_labels(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let y = LabelVector::new(y);
        let wide = predict_sets(&p, lo);
        let narrow = predict_sets(&p, hi);
        for i in 0..p.rows() {
            prop_assert!(narrow.set(i).iter().all(|j| wide.contains(i, *j)));
        }
        prop_assert!(avg_k_accuracy(&p, &y, hi).unwrap() <= avg_k_accuracy(&p, &y, lo).unwrap());
    }

    #[test]
    fn group_accuracies_recombine((p, y, _k) in probs_and_labels(), counts in prop::collection::vec(0usize..200, 8), lam in 0.0f64..0.6) {
        let counts = &counts[..p.cols()];
        let y = LabelVector::new(y);
        let m = evaluate_sets(&p, &y, lam, Some(counts), FrequencyGroups::default()).unwrap();
        let ga = m.group_accuracies.unwrap();
        let mut hits = 0.0;
        let mut total = 0;
        for g in [Group::Few, Group::Medium, Group::Many] {
            if let Some(s) = ga.get(g) {
                hits += s.accuracy * s.examples as f64;
                total += s.examples;
            }
        }
        prop_assert_eq!(total, p.rows());
        prop_assert!((hits / total as f64 - m.avg_k_accuracy).abs() <= 1e-12);
    }

    #[test]
    fn alpha_zero_reduces_to_positive_only((z, y, k) in batch()) {
        let y = LabelVector::new(y);
        let sc = propose_candidates(&lm(&z), &y, k).unwrap();
        let ml = bce_multilabel_loss(&lm(&z), &y, &sc, &AvgKConfig { alpha: 0.0, k_target: k }).unwrap();
        let pos = bce_pos_loss(&lm(&z), &y).unwrap();
        prop_assert!((ml.value - pos.value).abs() <= 1e-12);
        prop_assert!((&ml.grad - &pos.grad).iter().all(|d| d.abs() <= 1e-15));
    }

    #[test]
    fn beta_zero_reduces_to_positive_only((z, y, k) in batch()) {
        let y = LabelVector::new(y);
        let epr = epr_loss(&lm(&z), &y, &EprConfig { beta: 0.0, k_target: k }).unwrap();
        let pos = bce_pos_loss(&lm(&z), &y).unwrap();
        prop_assert_eq!(epr.value, pos.value);
        prop_assert_eq!(epr.grad, pos.grad);
    }

    #[test]
    fn k_one_alpha_one_is_assume_negative((z, y, _k) in batch()) {
        let y = LabelVector::new(y);
        let sc = propose_candidates(&lm(&z), &y, 1).unwrap();
        let ml = bce_multilabel_loss(&lm(&z), &y, &sc, &AvgKConfig { alpha: 1.0, k_target: 1 }).unwrap();
        let an = an_loss(&lm(&z), &y).unwrap();
        prop_assert!((ml.value - an.value).abs() <= 1e-12 * an.value.max(1.0));
        prop_assert!((&ml.grad - &an.grad).iter().all(|d| d.abs() <= 1e-15));
    }

    #[test]
    fn multilabel_loss_monotone_in_each_logit((z, y, k) in batch(), pick in any::<prop::sample::Index>(), step in 0.01f64..2.0) {
        let yv = LabelVector::new(y.clone());
        let sc: CandidateSetBatch = propose_candidates(&lm(&z), &yv, k).unwrap();
        let cfg = AvgKConfig { alpha: 0.5, k_target: k };
        let idx = pick.index(z.len());
        let (i, j) = (idx / z.ncols(), idx % z.ncols());
        let mut up = z.clone();
        up[[i, j]] += step;
        let before = bce_multilabel_loss(&lm(&z), &yv, &sc, &cfg).unwrap().value;
        let after = bce_multilabel_loss(&lm(&up), &yv, &sc, &cfg).unwrap().value;
        if sc.in_full_set(i, j) {
            prop_assert!(after < before);
        } else {
            prop_assert!(after > before);
        }
    }
}
