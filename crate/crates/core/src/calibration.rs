//! Threshold calibration and average-K evaluation.
//!
//! A single softmax threshold is chosen on validation data so that `K`
//! classes are returned per example on average; sets are then every class
//! whose probability reaches the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{kth_and_next_largest, LabelVector, ProbMatrix};

/// A calibrated softmax threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    lambda: f64,
    k_target: usize,
    n_val: usize,
    upper: f64,
    lower: f64,
}

impl Threshold {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn k_target(&self) -> usize {
        self.k_target
    }

    pub fn n_val(&self) -> usize {
        self.n_val
    }

    /// The `(K n_val)`-th and `(K n_val + 1)`-th largest calibration probabilities.
    pub fn order_statistics(&self) -> (f64, f64) {
        (self.upper, self.lower)
    }

    /// True when the two order statistics differ, i.e. the threshold
    /// separates exactly `K n_val` entries.
    pub fn has_strict_gap(&self) -> bool {
        self.upper > self.lower
    }
}

/// Midpoint of the `(K n)`-th and `(K n + 1)`-th largest entries of the
/// flattened `n x L` probability matrix.
pub fn calibrate(probs_val: &ProbMatrix, k_target: usize) -> Result<Threshold> {
    let (n_val, classes) = (probs_val.rows(), probs_val.cols());
    let rank = k_target * n_val;
    if k_target == 0 || rank + 1 > n_val * classes {
        return Err(Error::InvalidConfig(format!(
            "K = {k_target} is too large to calibrate {n_val} examples over {classes} classes"
        )));
    }
    let flat: Vec<f64> = probs_val.as_array().iter().copied().collect();
    let (upper, lower) = kth_and_next_largest(&flat, rank)?;
    Ok(Threshold {
        lambda: 0.5 * (upper + lower),
        k_target,
        n_val,
        upper,
        lower,
    })
}

/// Per-example predicted label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    sets: Vec<Vec<usize>>,
}

impl PredictionSet {
    pub fn new(sets: Vec<Vec<usize>>) -> Self {
        Self { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn mean_size(&self) -> f64 {
        if self.sets.is_empty() {
            return 0.0;
        }
        self.sets.iter().map(Vec::len).sum::<usize>() as f64 / self.sets.len() as f64
    }

    pub fn contains(&self, i: usize, label: usize) -> bool {
        self.sets[i].contains(&label)
    }
}

/// Every class whose probability is at least `lambda`.
pub fn predict_sets(probs: &ProbMatrix, lambda: f64) -> PredictionSet {
    let sets = probs
        .as_array()
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &p)| p >= lambda)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    PredictionSet { sets }
}

/// Fraction of examples whose true-class probability reaches `lambda`.
pub fn avg_k_accuracy(probs: &ProbMatrix, y: &LabelVector, lambda: f64) -> Result<f64> {
    y.check(probs.rows(), probs.cols())?;
    let hits = y
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| probs.as_array()[[i, label]] >= lambda)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// Counts of set sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetSizeHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub total: usize,
    pub mean: f64,
}

impl SetSizeHistogram {
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = BTreeMap::new();
        let (mut total, mut sum) = (0usize, 0usize);
        for s in sizes {
            *counts.entry(s).or_insert(0) += 1;
            total += 1;
            sum += s;
        }
        let mean = if total == 0 { 0.0 } else { sum as f64 / total as f64 };
        Self { counts, total, mean }
    }

    /// Number of distinct set sizes observed.
    pub fn support(&self) -> usize {
        self.counts.len()
    }

    /// Two-column `size,count` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,count\n");
        for (size, count) in &self.counts {
            let _ = writeln!(out, "{size},{count}");
        }
        out
    }
}

pub fn set_size_histogram(pred: &PredictionSet) -> SetSizeHistogram {
    SetSizeHistogram::from_sizes(pred.sets.iter().map(Vec::len))
}

/// Class-frequency buckets by number of training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyGroups {
    /// Classes with fewer training examples than this are few-shot.
    pub few_below: usize,
    /// Classes with more training examples than this are many-shot.
    pub many_above: usize,
}

impl Default for FrequencyGroups {
    fn default() -> Self {
        Self {
            few_below: 20,
            many_above: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Few,
    Medium,
    Many,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Few, Group::Medium, Group::Many];

    pub fn name(self) -> &'static str {
        match self {
            Group::Few => "few",
            Group::Medium => "medium",
            Group::Many => "many",
        }
    }
}

impl FrequencyGroups {
    pub fn classify(&self, train_count: usize) -> Group {
        if train_count < self.few_below {
            Group::Few
        } else if train_count <= self.many_above {
            Group::Medium
        } else {
            Group::Many
        }
    }
}

/// Metrics restricted to examples whose true class falls in one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub examples: usize,
    pub accuracy: f64,
    pub histogram: SetSizeHistogram,
}

/// Few / medium / many-shot breakdown; a group with no examples is `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracies {
    pub few: Option<GroupStats>,
    pub medium: Option<GroupStats>,
    pub many: Option<GroupStats>,
}

impl GroupAccuracies {
    pub fn get(&self, group: Group) -> Option<&GroupStats> {
        match group {
            Group::Few => self.few.as_ref(),
            Group::Medium => self.medium.as_ref(),
            Group::Many => self.many.as_ref(),
        }
    }
}

pub fn group_breakdown(
    probs: &ProbMatrix,
    y: &LabelVector,
    lambda: f64,
    class_train_counts: &[usize],
    groups: FrequencyGroups,
) -> Result<GroupAccuracies> {
    y.check(probs.rows(), probs.cols())?;
    if class_train_counts.len() != probs.cols() {
        return Err(Error::Shape(format!(
            "{} class counts for {} classes",
            class_train_counts.len(),
            probs.cols()
        )));
    }
    let pred = predict_sets(probs, lambda);
    let mut buckets: BTreeMap<Group, (usize, Vec<usize>)> = BTreeMap::new();
    for (i, &label) in y.as_slice().iter().enumerate() {
        let entry = buckets
            .entry(groups.classify(class_train_counts[label]))
            .or_default();
        if probs.as_array()[[i, label]] >= lambda {
            entry.0 += 1;
        }
        entry.1.push(pred.set(i).len());
    }
    let mut out = GroupAccuracies::default();
    for (group, (hits, sizes)) in buckets {
        let stats = GroupStats {
            examples: sizes.len(),
            accuracy: hits as f64 / sizes.len() as f64,
            histogram: SetSizeHistogram::from_sizes(sizes),
        };
        match group {
            Group::Few => out.few = Some(stats),
            Group::Medium => out.medium = Some(stats),
            Group::Many => out.many = Some(stats),
        }
    }
    Ok(out)
}

/// Everything reported for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub avg_k_accuracy: f64,
    pub mean_set_size: f64,
    pub size_histogram: SetSizeHistogram,
    pub group_accuracies: Option<GroupAccuracies>,
}

/// Accuracy, set sizes and (given training counts) the frequency breakdown.
pub fn evaluate_sets(
    probs: &ProbMatrix,
    y: &LabelVector,
    lambda: f64,
    class_train_counts: Option<&[usize]>,
    groups: FrequencyGroups,
) -> Result<SetMetrics> {
    let accuracy = avg_k_accuracy(probs, y, lambda)?;
    let histogram = set_size_histogram(&predict_sets(probs, lambda));
    let group_accuracies = class_train_counts
        .map(|counts| group_breakdown(probs, y, lambda, counts, groups))
        .transpose()?;
    Ok(SetMetrics {
        avg_k_accuracy: accuracy,
        mean_set_size: histogram.mean,
        size_histogram: histogram,
        group_accuracies,
    })
}
