//! Mini-batch training with early stopping on validation average-K accuracy.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{avg_k_accuracy, calibrate, evaluate_sets, FrequencyGroups, SetMetrics, Threshold};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{an_loss, avgk_loss, bce_pos_loss, ce_loss, epr_loss, AvgKConfig, EprConfig};
use crate::math::{softmax_array, LabelVector, LogitMatrix, ProbMatrix};
use crate::model::{Activation, Architecture, Checkpoint, Sgd, TwoHeadMlp};

/// Rows per forward pass when scoring a whole split. Fixed so that
/// probabilities, and therefore thresholds, are reproducible bit for bit.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    An,
    Epr,
    Avgk,
    BcePos,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::An,
        LossKind::Epr,
        LossKind::Avgk,
        LossKind::BcePos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::An => "an",
            LossKind::Epr => "epr",
            LossKind::Avgk => "avgk",
            LossKind::BcePos => "bce-pos",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidConfig(format!("unknown loss {s:?}; valid kinds: {}", valid.join(", ")))
            })
    }
}

/// Divide the learning rate by `divisor` from `epoch` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub epoch: usize,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub k_target: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: Vec<LrStep>,
    pub max_epochs: usize,
    /// Stop after this many epochs without improvement; `None` keeps the
    /// best checkpoint over all epochs.
    pub patience: Option<usize>,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Avgk,
            k_target: 5,
            alpha: 0.3,
            beta: 0.01,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: vec![
                LrStep { epoch: 150, divisor: 10.0 },
                LrStep { epoch: 225, divisor: 10.0 },
            ],
            max_epochs: 300,
            patience: None,
            seed: 0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum = {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay = {} must be >= 0",
                self.weight_decay
            )));
        }
        if let Some(step) = self.lr_schedule.iter().find(|s| s.divisor.is_nan() || s.divisor <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr divisor {} at epoch {} must be > 0",
                step.divisor, step.epoch
            )));
        }
        if self.k_target == 0 || self.k_target >= classes {
            return Err(Error::InvalidConfig(format!(
                "K = {} must satisfy 1 <= K < L = {classes}",
                self.k_target
            )));
        }
        match self.loss {
            LossKind::Epr => self.epr().validate(classes),
            LossKind::Avgk => self.avgk().validate(classes),
            _ => Ok(()),
        }
    }

    /// Base rate divided by every scheduled divisor whose epoch has been reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .fold(self.learning_rate, |lr, s| lr / s.divisor)
    }

    pub fn epr(&self) -> EprConfig {
        EprConfig {
            beta: self.beta,
            k_target: self.k_target,
        }
    }

    pub fn avgk(&self) -> AvgKConfig {
        AvgKConfig {
            alpha: self.alpha,
            k_target: self.k_target,
        }
    }

    pub fn architecture(&self, input_dim: usize, classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            classes,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_avgk_accuracy: f64,
    pub lambda_val: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Value and head gradients of one training loss on one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub value: f64,
    pub grad_ml: Array2<f64>,
    pub grad_sccp: Array2<f64>,
}

/// Evaluates `cfg.loss` on a batch. Single-head losses train the ML head;
/// the SCCP head then receives no gradient.
pub fn batch_loss(z_ml: Array2<f64>, z_sccp: Array2<f64>, y: &LabelVector, cfg: &TrainConfig) -> Result<BatchLoss> {
    let z_ml = LogitMatrix::new(z_ml)?;
    let single = |out: crate::losses::LossOutput| BatchLoss {
        value: out.value,
        grad_sccp: Array2::zeros(out.grad.raw_dim()),
        grad_ml: out.grad,
    };
    Ok(match cfg.loss {
        LossKind::Ce => single(ce_loss(&z_ml, y)?),
        LossKind::An => single(an_loss(&z_ml, y)?),
        LossKind::BcePos => single(bce_pos_loss(&z_ml, y)?),
        LossKind::Epr => single(epr_loss(&z_ml, y, &cfg.epr())?),
        LossKind::Avgk => {
            let z_sccp = LogitMatrix::new(z_sccp)?;
            let out = avgk_loss(&z_ml, &z_sccp, y, &cfg.avgk())?;
            BatchLoss {
                value: out.value,
                grad_ml: out.grad_ml,
                grad_sccp: out.grad_sccp,
            }
        }
    })
}

/// Softmax of the ML-head logits, scored in fixed-size chunks and stacked in
/// input order.
pub fn predict_probs(model: &TwoHeadMlp, xs: ArrayView2<'_, f64>) -> Result<ProbMatrix> {
    if xs.nrows() == 0 {
        return Err(Error::InvalidData("no rows to score".into()));
    }
    let blocks = xs
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .map(|chunk| softmax_array(&model.forward(chunk)?.z_ml))
        .collect::<Result<Vec<_>>>()?;
    ProbMatrix::concat(&blocks)
}

/// Calibrates the threshold on the validation split and scores the
/// validation set with it.
pub fn validate_model(model: &TwoHeadMlp, data: &DatasetSplit, k_target: usize) -> Result<(Threshold, f64)> {
    let probs = predict_probs(model, data.val.features.view())?;
    let thr = calibrate(&probs, k_target)?;
    let acc = avg_k_accuracy(&probs, &data.val.label_vector(), thr.lambda())?;
    Ok((thr, acc))
}

/// Test-set metrics under the validation-calibrated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub k_target: usize,
    pub lambda_val: f64,
    pub val_avgk_accuracy: f64,
    pub test: SetMetrics,
}

pub fn evaluate_model(model: &TwoHeadMlp, data: &DatasetSplit, k_target: usize, groups: FrequencyGroups) -> Result<Evaluation> {
    let (thr, val_acc) = validate_model(model, data, k_target)?;
    let probs = predict_probs(model, data.test.features.view())?;
    let test = evaluate_sets(
        &probs,
        &data.test.label_vector(),
        thr.lambda(),
        Some(&data.class_train_counts),
        groups,
    )?;
    Ok(Evaluation {
        k_target,
        lambda_val: thr.lambda(),
        val_avgk_accuracy: val_acc,
        test,
    })
}

/// Seeded initialization followed by [`train`].
pub fn train_from_seed(data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let arch = cfg.architecture(data.feature_dim(), data.classes);
    let model = TwoHeadMlp::new(&arch, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    train(model, data, cfg)
}

/// Trains `model` and returns the checkpoint with the best validation
/// average-K accuracy (epoch 0 is the untrained model).
pub fn train(mut model: TwoHeadMlp, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(data.classes)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidData("training and validation splits must be non-empty".into()));
    }
    if model.architecture().input_dim != data.feature_dim() || model.architecture().classes != data.classes {
        return Err(Error::Shape(format!(
            "model {:?} does not fit data with {} features and {} classes",
            model.architecture(),
            data.feature_dim(),
            data.classes
        )));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);

    let (thr, acc) = validate_model(&model, data, cfg.k_target)?;
    let mut best = Checkpoint {
        model: model.clone(),
        epoch: 0,
        best_val_accuracy: acc,
        lambda_val: thr.lambda(),
        k_target: cfg.k_target,
        seed: cfg.seed,
    };
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let x = data.train.features.select(Axis(0), rows);
            let y = LabelVector::new(rows.iter().map(|&r| data.train.labels[r]).collect());
            let pass = model.forward(x.view())?;
            let loss = batch_loss(pass.z_ml.clone(), pass.z_sccp.clone(), &y, cfg)?;
            if !loss.value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}; training aborted")));
            }
            loss_sum += loss.value * rows.len() as f64;
            let grads = model.backward(&pass, &loss.grad_ml, &loss.grad_sccp)?;
            opt.step(&mut model, &grads, lr)?;
        }

        let (thr, acc) = validate_model(&model, data, cfg.k_target)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_avgk_accuracy: acc,
            lambda_val: thr.lambda(),
            lr,
        });
        if acc > best.best_val_accuracy {
            best = Checkpoint {
                model: model.clone(),
                epoch,
                best_val_accuracy: acc,
                lambda_val: thr.lambda(),
                k_target: cfg.k_target,
                seed: cfg.seed,
            };
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
    })
}
