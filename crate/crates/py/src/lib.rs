//! Python module `avgk`. Matrices are passed as lists of rows.

use avgk_core::calibration::{self, FrequencyGroups};
use avgk_core::data::{self, DatasetSplit, SyntheticSpec};
use avgk_core::losses::{self, AvgKConfig, EprConfig, LossOutput};
use avgk_core::math::{softmax_rows, LabelVector, LogitMatrix, ProbMatrix};
use avgk_core::model::Checkpoint;
use avgk_core::sccp;
use avgk_core::training::{self, LossKind, LrStep, TrainConfig};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: avgk_core::Error) -> PyErr {
    match e {
        avgk_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn logits(z: &[Vec<f64>]) -> PyResult<LogitMatrix> {
    LogitMatrix::new(array(z)?).map_err(py_err)
}

fn probs(p: &[Vec<f64>]) -> PyResult<ProbMatrix> {
    ProbMatrix::new(array(p)?).map_err(py_err)
}

type LossPair = (f64, Vec<Vec<f64>>);

fn pair(out: avgk_core::Result<LossOutput>) -> PyResult<LossPair> {
    let out = out.map_err(py_err)?;
    Ok((out.value, rows(&out.grad)))
}

/// Row-wise softmax.
#[pyfunction]
fn softmax(z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(softmax_rows(&logits(&z)?).as_array()))
}

/// Cross-entropy: `(value, gradient)`.
#[pyfunction]
fn ce_loss(z: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<LossPair> {
    pair(losses::ce_loss(&logits(&z)?, &LabelVector::new(y)))
}

/// Assume-negative BCE: `(value, gradient)`.
#[pyfunction]
fn an_loss(z: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<LossPair> {
    pair(losses::an_loss(&logits(&z)?, &LabelVector::new(y)))
}

/// BCE on the observed labels only: `(value, gradient)`.
#[pyfunction]
fn bce_pos_loss(z: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<LossPair> {
    pair(losses::bce_pos_loss(&logits(&z)?, &LabelVector::new(y)))
}

/// Positive-only BCE plus `beta * (K_hat - k)^2`: `(value, gradient)`.
#[pyfunction]
fn epr_loss(z: Vec<Vec<f64>>, y: Vec<usize>, k: usize, beta: f64) -> PyResult<LossPair> {
    let cfg = EprConfig { beta, k_target: k };
    pair(losses::epr_loss(&logits(&z)?, &LabelVector::new(y), &cfg))
}

/// Joint loss on both heads. Returns a dict with `value`, `ce`, `bce`,
/// `grad_ml`, `grad_sccp` and `candidates`.
#[pyfunction]
fn avgk_loss<'py>(
    py: Python<'py>,
    z_ml: Vec<Vec<f64>>,
    z_sccp: Vec<Vec<f64>>,
    y: Vec<usize>,
    k: usize,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = AvgKConfig { alpha, k_target: k };
    let out = losses::avgk_loss(&logits(&z_ml)?, &logits(&z_sccp)?, &LabelVector::new(y), &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("value", out.value)?;
    d.set_item("ce", out.ce_value)?;
    d.set_item("bce", out.bce_value)?;
    d.set_item("grad_ml", rows(&out.grad_ml))?;
    d.set_item("grad_sccp", rows(&out.grad_sccp))?;
    let sets: Vec<Vec<usize>> = (0..out.candidates.batch_size()).map(|i| out.candidates.candidates(i).to_vec()).collect();
    d.set_item("candidates", sets)?;
    Ok(d)
}

/// Candidate classes per row (true labels excluded), `(k - 1) * rows` in total.
#[pyfunction]
fn propose_candidates(z_sccp: Vec<Vec<f64>>, y: Vec<usize>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let c = sccp::propose_candidates(&logits(&z_sccp)?, &LabelVector::new(y), k).map_err(py_err)?;
    Ok((0..c.batch_size()).map(|i| c.candidates(i).to_vec()).collect())
}

/// Threshold giving `k` classes per validation example on average.
#[pyfunction]
fn calibrate(probs_val: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    Ok(calibration::calibrate(&probs(&probs_val)?, k).map_err(py_err)?.lambda())
}

#[pyfunction]
fn predict_sets(p: Vec<Vec<f64>>, lam: f64) -> PyResult<Vec<Vec<usize>>> {
    let sets = calibration::predict_sets(&probs(&p)?, lam);
    Ok((0..sets.len()).map(|i| sets.set(i).to_vec()).collect())
}

#[pyfunction]
fn avg_k_accuracy(p: Vec<Vec<f64>>, y: Vec<usize>, lam: f64) -> PyResult<f64> {
    calibration::avg_k_accuracy(&probs(&p)?, &LabelVector::new(y), lam).map_err(py_err)
}

/// Train/validation/test split with per-class training counts.
#[pyclass(name = "Dataset", module = "avgk", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DatasetSplit,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::read_split_dir(dir.as_ref()).map_err(py_err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        data::write_split_dir(&self.inner, dir.as_ref()).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn class_train_counts(&self) -> Vec<usize> {
        self.inner.class_train_counts.clone()
    }

    /// `(features, labels)` of `"train"`, `"val"` or `"test"`.
    fn split(&self, name: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let s = match name {
            "train" => &self.inner.train,
            "val" => &self.inner.val,
            "test" => &self.inner.test,
            _ => return Err(PyValueError::new_err(format!("unknown split {name:?}"))),
        };
        Ok((rows(&s.features), s.labels.clone()))
    }

    /// Covered true-posterior mass of the Bayes average-K sets on the test
    /// split: `(accuracy, stderr)`. Synthetic data only.
    fn bayes_avgk_accuracy(&self, k: usize) -> PyResult<(f64, f64)> {
        let spec = self
            .inner
            .spec
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("dataset has no generator spec"))?;
        let b = data::bayes_avgk_classifier(&spec.oracle().map_err(py_err)?, &self.inner.test.features, k).map_err(py_err)?;
        Ok((b.accuracy, b.accuracy_stderr))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(classes={}, features={}, train={}, val={}, test={})",
            self.inner.classes,
            self.inner.feature_dim(),
            self.inner.train.len(),
            self.inner.val.len(),
            self.inner.test.len()
        )
    }
}

/// Samples the synthetic Gaussian mixture.
#[pyfunction]
#[pyo3(signature = (classes=10, superclasses=5, dim=2, sep=1.0, between=6.0, sigma=1.0, prior_exponent=0.0, n_train=20000, n_val=2000, n_test=5000, seed=1))]
#[allow(clippy::too_many_arguments)]
fn generate(
    classes: usize,
    superclasses: usize,
    dim: usize,
    sep: f64,
    between: f64,
    sigma: f64,
    prior_exponent: f64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let spec = SyntheticSpec {
        classes,
        feature_dim: dim,
        superclasses,
        within_sep: sep,
        between_sep: between,
        sigma,
        prior_exponent,
        seed,
        n_train,
        n_val,
        n_test,
    };
    Ok(PyDataset {
        inner: data::generate(&spec).map_err(py_err)?,
    })
}

/// Trained two-head network with its validation threshold.
#[pyclass(name = "Model", module = "avgk")]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            ckpt: Checkpoint::load(path.as_ref()).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.ckpt.epoch
    }

    #[getter]
    fn lambda_val(&self) -> f64 {
        self.ckpt.lambda_val
    }

    #[getter]
    fn val_accuracy(&self) -> f64 {
        self.ckpt.best_val_accuracy
    }

    /// Softmax of the prediction head.
    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = training::predict_probs(&self.ckpt.model, array(&x)?.view()).map_err(py_err)?;
        Ok(rows(p.as_array()))
    }

    /// Prediction sets under the stored validation threshold.
    fn predict_sets(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<usize>>> {
        predict_sets(self.predict_proba(x)?, self.ckpt.lambda_val)
    }

    /// Test metrics with the threshold recalibrated on validation.
    #[pyo3(signature = (dataset, k=None))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, k: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let k = k.unwrap_or(self.ckpt.k_target);
        let e = training::evaluate_model(&self.ckpt.model, &dataset.inner, k, FrequencyGroups::default()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("k", k)?;
        d.set_item("lambda_val", e.lambda_val)?;
        d.set_item("val_avgk_accuracy", e.val_avgk_accuracy)?;
        d.set_item("test_avgk_accuracy", e.test.avg_k_accuracy)?;
        d.set_item("mean_set_size", e.test.mean_set_size)?;
        let hist: Vec<(usize, usize)> = e.test.size_histogram.counts.into_iter().collect();
        d.set_item("size_histogram", hist)?;
        Ok(d)
    }
}

/// Trains with early stopping on validation average-K accuracy.
#[pyfunction]
#[pyo3(signature = (dataset, loss="avgk", k=5, alpha=0.3, beta=0.01, batch=64, lr=0.1, momentum=0.9, weight_decay=1e-4, epochs=300, lr_steps=vec![(150, 10.0), (225, 10.0)], hidden=vec![64, 64], patience=None, seed=1))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    loss: &str,
    k: usize,
    alpha: f64,
    beta: f64,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    epochs: usize,
    lr_steps: Vec<(usize, f64)>,
    hidden: Vec<usize>,
    patience: Option<usize>,
    seed: u64,
) -> PyResult<PyModel> {
    let cfg = TrainConfig {
        loss: loss.parse::<LossKind>().map_err(py_err)?,
        k_target: k,
        alpha,
        beta,
        batch_size: batch,
        learning_rate: lr,
        momentum,
        weight_decay,
        lr_schedule: lr_steps.into_iter().map(|(epoch, divisor)| LrStep { epoch, divisor }).collect(),
        max_epochs: epochs,
        patience,
        seed,
        hidden,
    };
    let data = &dataset.inner;
    let outcome = py.detach(|| training::train_from_seed(data, &cfg)).map_err(py_err)?;
    Ok(PyModel {
        ckpt: outcome.checkpoint,
    })
}

#[pymodule]
fn avgk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(an_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_pos_loss, m)?)?;
    m.add_function(wrap_pyfunction!(epr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(avgk_loss, m)?)?;
    m.add_function(wrap_pyfunction!(propose_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(predict_sets, m)?)?;
    m.add_function(wrap_pyfunction!(avg_k_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
