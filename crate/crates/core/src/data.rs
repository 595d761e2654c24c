//! Synthetic Gaussian-mixture datasets with closed-form posteriors, the
//! Bayes-optimal average-K classifier, and CSV import/export.
//!
//! Classes are grouped into superclasses: class `j` belongs to superclass
//! `j % superclasses`. Superclass centres sit on a square grid with spacing
//! `between_sep * sigma`; the members of one superclass sit on a regular
//! polygon around the centre whose neighbouring vertices are
//! `within_sep * sigma` apart. Small `within_sep` makes the members of a
//! superclass hard to tell apart. Priors follow `pi_j ∝ (j + 1)^-prior_exponent`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, predict_sets, PredictionSet, Threshold};
use crate::error::{Error, Result};
use crate::math::{LabelVector, ProbMatrix};

/// Parameters of a synthetic Gaussian-mixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub superclasses: usize,
    /// Distance between neighbouring member means, in units of `sigma`.
    pub within_sep: f64,
    /// Grid spacing of superclass centres, in units of `sigma`.
    pub between_sep: f64,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// `0` gives uniform priors; larger values give a longer tail.
    pub prior_exponent: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            feature_dim: 2,
            superclasses: 5,
            within_sep: 1.0,
            between_sep: 6.0,
            sigma: 1.0,
            prior_exponent: 0.0,
            seed: 0,
            n_train: 20_000,
            n_val: 2_000,
            n_test: 5_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("synthetic spec: {msg}")));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.superclasses == 0 || self.superclasses > self.classes {
            return bad(format!(
                "superclasses = {} must be in 1..={}",
                self.superclasses, self.classes
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        for (name, v) in [
            ("within_sep", self.within_sep),
            ("between_sep", self.between_sep),
            ("prior_exponent", self.prior_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        Ok(())
    }

    /// Normalized class priors.
    pub fn priors(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.classes)
            .map(|j| ((j + 1) as f64).powf(-self.prior_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    pub fn superclass_of(&self, class: usize) -> usize {
        class % self.superclasses
    }

    /// Class means, one row per class.
    pub fn means(&self) -> Array2<f64> {
        let mut means = Array2::zeros((self.classes, self.feature_dim));
        let grid = (self.superclasses as f64).sqrt().ceil() as usize;
        for s in 0..self.superclasses {
            let members: Vec<usize> = (s..self.classes).step_by(self.superclasses).collect();
            let m = members.len();
            let (cx, cy) = if self.feature_dim == 1 {
                (s as f64 * self.between_sep, 0.0)
            } else {
                ((s % grid) as f64 * self.between_sep, (s / grid) as f64 * self.between_sep)
            };
            for (k, &class) in members.iter().enumerate() {
                let (dx, dy) = if m == 1 {
                    (0.0, 0.0)
                } else if self.feature_dim == 1 {
                    ((k as f64 - (m - 1) as f64 / 2.0) * self.within_sep, 0.0)
                } else {
                    let radius = self.within_sep / (2.0 * (std::f64::consts::PI / m as f64).sin());
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                    (radius * angle.cos(), radius * angle.sin())
                };
                means[[class, 0]] = (cx + dx) * self.sigma;
                if self.feature_dim > 1 {
                    means[[class, 1]] = (cy + dy) * self.sigma;
                }
            }
        }
        means
    }

    pub fn oracle(&self) -> Result<PosteriorOracle> {
        self.validate()?;
        PosteriorOracle::new(self.means(), self.priors(), self.sigma)
    }
}

/// Closed-form `P(Y = j | X = x)` for an isotropic Gaussian mixture with shared variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorOracle {
    means: Array2<f64>,
    log_priors: Vec<f64>,
    priors: Vec<f64>,
    sigma: f64,
}

impl PosteriorOracle {
    pub fn new(means: Array2<f64>, priors: Vec<f64>, sigma: f64) -> Result<Self> {
        if means.nrows() != priors.len() || priors.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{} means for {} priors",
                means.nrows(),
                priors.len()
            )));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || priors.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err(Error::InvalidConfig("priors must be positive and sum to 1".into()));
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!("sigma = {sigma} must be positive")));
        }
        Ok(Self {
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            priors,
            means,
            sigma,
        })
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Posterior over classes at `x`, normalized in log space.
    pub fn posterior(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, oracle expects {}",
                x.len(),
                self.feature_dim()
            )));
        }
        let inv_two_var = 1.0 / (2.0 * self.sigma * self.sigma);
        let logits: Vec<f64> = self
            .means
            .rows()
            .into_iter()
            .zip(&self.log_priors)
            .map(|(mu, lp)| {
                let d2: f64 = mu.iter().zip(x.iter()).map(|(m, v)| (v - m) * (v - m)).sum();
                lp - d2 * inv_two_var
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Posteriors for every row of `xs`.
    pub fn posterior_matrix(&self, xs: &Array2<f64>) -> Result<ProbMatrix> {
        let mut out = Array2::zeros((xs.nrows(), self.classes()));
        for (x, mut row) in xs.rows().into_iter().zip(out.rows_mut()) {
            for (dst, p) in row.iter_mut().zip(self.posterior(x)?) {
                *dst = p;
            }
        }
        ProbMatrix::new(out)
    }

    /// Draws `n` labelled samples.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
        let class_dist = WeightedIndex::new(&self.priors).expect("validated priors");
        let d = self.feature_dim();
        let mut xs = Array2::zeros((n, d));
        let mut ys = Vec::with_capacity(n);
        for mut row in xs.rows_mut() {
            let c = class_dist.sample(rng);
            for (k, v) in row.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(rng);
                *v = self.means[[c, k]] + self.sigma * noise;
            }
            ys.push(c);
        }
        (xs, ys)
    }
}

/// One partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Positions of these rows in the original table or sample stream.
    pub indices: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_vector(&self) -> LabelVector {
        LabelVector::new(self.labels.clone())
    }

    fn select(features: &Array2<f64>, labels: &[usize], rows: &[usize]) -> Self {
        Self {
            features: features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| labels[r]).collect(),
            indices: rows.to_vec(),
        }
    }
}

/// Train / validation / test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub classes: usize,
    pub train: Subset,
    pub val: Subset,
    pub test: Subset,
    pub class_train_counts: Vec<usize>,
    /// Present for synthetic data.
    pub spec: Option<SyntheticSpec>,
}

impl DatasetSplit {
    pub fn new(classes: usize, train: Subset, val: Subset, test: Subset, spec: Option<SyntheticSpec>) -> Result<Self> {
        let dims = [&train, &val, &test].map(|s| s.features.ncols());
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(Error::Shape(format!("splits disagree on feature count: {dims:?}")));
        }
        for (name, subset) in [("train", &train), ("val", &val), ("test", &test)] {
            if subset.is_empty() {
                return Err(Error::InvalidData(format!("{name} split is empty")));
            }
            if let Some(&bad) = subset.labels.iter().find(|&&y| y >= classes) {
                return Err(Error::InvalidData(format!(
                    "{name} split has label {bad} >= {classes}"
                )));
            }
        }
        let mut class_train_counts = vec![0; classes];
        for &y in &train.labels {
            class_train_counts[y] += 1;
        }
        Ok(Self {
            classes,
            train,
            val,
            test,
            class_train_counts,
            spec,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.train.features.ncols()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            classes: self.classes,
            feature_dim: self.feature_dim(),
            n_train: self.train.len(),
            n_val: self.val.len(),
            n_test: self.test.len(),
            class_train_counts: self.class_train_counts.clone(),
            seed: self.spec.as_ref().map(|s| s.seed),
            spec: self.spec.clone(),
        }
    }
}

/// Samples a dataset: `n_train + n_val + n_test` draws in one seeded stream,
/// split in that order.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    let oracle = spec.oracle()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_train + spec.n_val + spec.n_test;
    let (xs, ys) = oracle.sample(n, &mut rng);
    let train_rows: Vec<usize> = (0..spec.n_train).collect();
    let val_rows: Vec<usize> = (spec.n_train..spec.n_train + spec.n_val).collect();
    let test_rows: Vec<usize> = (spec.n_train + spec.n_val..n).collect();
    DatasetSplit::new(
        spec.classes,
        Subset::select(&xs, &ys, &train_rows),
        Subset::select(&xs, &ys, &val_rows),
        Subset::select(&xs, &ys, &test_rows),
        Some(spec.clone()),
    )
}

/// Result of thresholding the true posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesAvgK {
    pub threshold: Threshold,
    pub sets: PredictionSet,
    /// Monte-Carlo estimate of `P(Y ∈ g*(X))`: the mean posterior mass the
    /// sets cover.
    pub accuracy: f64,
    /// Standard error of `accuracy`.
    pub accuracy_stderr: f64,
}

/// The Bayes-optimal average-K classifier on a sample of inputs: the true
/// posteriors thresholded at the level that returns `K` classes on average.
pub fn bayes_avgk_classifier(oracle: &PosteriorOracle, xs: &Array2<f64>, k_target: usize) -> Result<BayesAvgK> {
    let post = oracle.posterior_matrix(xs)?;
    let threshold = calibrate(&post, k_target)?;
    let (accuracy, accuracy_stderr) = covered_mass(&post, threshold.lambda());
    Ok(BayesAvgK {
        sets: predict_sets(&post, threshold.lambda()),
        threshold,
        accuracy,
        accuracy_stderr,
    })
}

/// Mean and standard error of the posterior mass covered by threshold sets.
pub fn covered_mass(post: &ProbMatrix, lambda: f64) -> (f64, f64) {
    let masses: Vec<f64> = post
        .as_array()
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&p| p >= lambda).sum())
        .collect();
    let n = masses.len() as f64;
    let mean = masses.iter().sum::<f64>() / n;
    let var = masses.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Split sizes for fraction-based ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.1, test: 0.2 }
    }
}

/// Reads a numeric CSV table (features..., integer label) and splits it with
/// a seeded shuffle. Validation and test sizes are floored; the remainder
/// goes to training. A non-numeric first row is treated as a header.
pub fn ingest_table(path: &Path, classes: Option<usize>, fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    if !(fractions.val >= 0.0 && fractions.test >= 0.0 && fractions.val + fractions.test < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fractions val = {}, test = {} must be >= 0 and sum below 1",
            fractions.val, fractions.test
        )));
    }
    let table = read_table(path, classes)?;
    let n = table.labels.len();
    let n_val = (n as f64 * fractions.val).floor() as usize;
    let n_test = (n as f64 * fractions.test).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    DatasetSplit::new(
        table.classes,
        Subset::select(&table.features, &table.labels, train),
        Subset::select(&table.features, &table.labels, val),
        Subset::select(&table.features, &table.labels, test),
        None,
    )
}

/// A parsed CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Parses `features..., label` rows. With `classes = None` the class count
/// is inferred as `max label + 1`.
pub fn read_table(path: &Path, classes: Option<usize>) -> Result<Table> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut width = None;
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if width.is_none() && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            // header
            width = Some(cells.len());
            continue;
        }
        let expected = *width.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(parse_err(
                line_no,
                format!("expected {expected} columns, found {}", cells.len()),
            ));
        }
        if expected < 2 {
            return Err(parse_err(line_no, "need at least one feature and a label".into()));
        }
        let (feature_cells, label_cell) = cells.split_at(expected - 1);
        for cell in feature_cells {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite cell {cell:?}")));
            }
            flat.push(v);
        }
        let label: usize = label_cell[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {:?} is not a class index", label_cell[0])))?;
        if let Some(l) = classes {
            if label >= l {
                return Err(parse_err(line_no, format!("label {label} >= declared class count {l}")));
            }
        }
        labels.push(label);
    }
    let width = width.unwrap_or(0);
    if labels.is_empty() {
        return Err(Error::InvalidData(format!("{} has no data rows", path.display())));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if classes < 2 {
        return Err(Error::InvalidData(format!("{} needs at least 2 classes", path.display())));
    }
    let features = Array2::from_shape_vec((labels.len(), width - 1), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Table {
        features,
        labels,
        classes,
    })
}

/// Writes `features..., label` with a header row. Values use the shortest
/// representation that parses back to the same bits.
pub fn write_table(path: &Path, features: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..features.ncols()).map(|k| format!("x{k}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for (row, label) in features.rows().into_iter().zip(labels) {
        for v in row {
            write!(out, "{v},")?;
        }
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Summary written next to the split CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub classes: usize,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub class_train_counts: Vec<usize>,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
}

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `manifest.json` into `dir`,
/// creating it if needed.
pub fn write_split_dir(data: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, subset) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_table(&split_path(dir, name), &subset.features, &subset.labels)?;
    }
    let manifest = serde_json::to_string_pretty(&data.manifest())?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}

/// Reads a directory written by [`write_split_dir`].
pub fn read_split_dir(dir: &Path) -> Result<DatasetSplit> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let mut offset = 0;
    let mut load = |name: &str| -> Result<Subset> {
        let t = read_table(&split_path(dir, name), Some(manifest.classes))?;
        let n = t.labels.len();
        let subset = Subset {
            features: t.features,
            labels: t.labels,
            indices: (offset..offset + n).collect(),
        };
        offset += n;
        Ok(subset)
    };
    let (train, val, test) = (load("train")?, load("val")?, load("test")?);
    let data = DatasetSplit::new(manifest.classes, train, val, test, manifest.spec.clone())?;
    if data.feature_dim() != manifest.feature_dim || data.class_train_counts != manifest.class_train_counts {
        return Err(Error::InvalidData(format!(
            "{} disagrees with the split files",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            superclasses: 2,
            n_train: 50,
            n_val: 10,
            n_test: 20,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn priors_normalized_and_decreasing() {
        let spec = SyntheticSpec {
            classes: 30,
            prior_exponent: 1.2,
            ..SyntheticSpec::default()
        };
        let p = spec.priors();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn member_means_respect_within_separation() {
        let spec = SyntheticSpec {
            classes: 10,
            superclasses: 5,
            within_sep: 0.5,
            sigma: 2.0,
            ..SyntheticSpec::default()
        };
        let m = spec.means();
        let d = (&m.row(0) - &m.row(5)).mapv(|v| v * v).sum().sqrt();
        assert_abs_diff_eq!(d, 0.5 * 2.0, epsilon = 1e-12);

        let spec = SyntheticSpec {
            classes: 20,
            superclasses: 4,
            within_sep: 1.0,
            ..SyntheticSpec::default()
        };
        let m = spec.means();
        // neighbours on the pentagon of superclass 0 are classes 0 and 4
        let d = (&m.row(0) - &m.row(4)).mapv(|v| v * v).sum().sqrt();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generate_is_deterministic_and_consistent() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (50, 10, 20));
        assert_eq!(a.class_train_counts.iter().sum::<usize>(), 50);
        let c = generate(&SyntheticSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            SyntheticSpec { n_val: 0, ..small_spec() },
            SyntheticSpec { sigma: 0.0, ..small_spec() },
            SyntheticSpec { superclasses: 5, ..small_spec() },
            SyntheticSpec { classes: 1, superclasses: 1, ..small_spec() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn posterior_symmetry_and_separation() {
        let oracle = PosteriorOracle::new(array![[-1.0, 0.0], [1.0, 0.0]], vec![0.5, 0.5], 1.0).unwrap();
        let p = oracle.posterior(array![0.0, 3.0].view()).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);

        let far = PosteriorOracle::new(array![[0.0, 0.0], [100.0, 0.0]], vec![0.5, 0.5], 1.0).unwrap();
        let p = far.posterior(array![100.0, 0.0].view()).unwrap();
        assert!(p[1] == 1.0 && p[0] < 1e-300);
        assert!(far.posterior(array![1.0].view()).is_err());
    }

    #[test]
    fn posterior_matches_direct_density_ratio() {
        let spec = SyntheticSpec {
            classes: 5,
            superclasses: 2,
            prior_exponent: 0.8,
            sigma: 1.3,
            ..SyntheticSpec::default()
        };
        let oracle = spec.oracle().unwrap();
        let means = spec.means();
        let priors = spec.priors();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (xs, _) = oracle.sample(25, &mut rng);
        for x in xs.rows() {
            // unnormalized joint densities evaluated independently
            let joint: Vec<f64> = (0..5)
                .map(|j| {
                    let d2: f64 = (0..2).map(|k| (x[k] - means[[j, k]]).powi(2)).sum();
                    priors[j] * (-d2 / (2.0 * 1.3 * 1.3)).exp() / (2.0 * std::f64::consts::PI * 1.3 * 1.3)
                })
                .collect();
            let total: f64 = joint.iter().sum();
            let p = oracle.posterior(x).unwrap();
            for j in 0..5 {
                assert_abs_diff_eq!(p[j], joint[j] / total, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn read_table_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let cases = [
            ("1,2,0\n3,4\n", 2),
            ("1,2,0\n3,abc,1\n", 2),
            ("a,b,label\n1,2,0\n3,4,7\n", 3),
            ("1,2,0.5\n", 1),
        ];
        for (text, line) in cases {
            fs::write(&path, text).unwrap();
            match read_table(&path, Some(2)) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn ingest_honours_fractions_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "f0,f1,y\n0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,0\n0.7,0.8,1\n").unwrap();
        let data = ingest_table(&path, None, SplitFractions { val: 0.25, test: 0.25 }, 1).unwrap();
        assert_eq!((data.train.len(), data.val.len(), data.test.len()), (2, 1, 1));
        assert_eq!(data.classes, 2);
        let mut all: Vec<usize> = [&data.train, &data.val, &data.test]
            .iter()
            .flat_map(|s| s.indices.clone())
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let again = ingest_table(&path, None, SplitFractions { val: 0.25, test: 0.25 }, 1).unwrap();
        assert_eq!(data, again);
        // 0.3 * 4 floors to 1 in each, remainder to train
        let d = ingest_table(&path, Some(2), SplitFractions { val: 0.3, test: 0.3 }, 9).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (2, 1, 1));
    }
}
