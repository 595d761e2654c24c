//! Two-head MLP: a shared fully-connected trunk producing features `H`,
//! an ML head `Z = H W + b` and an SCCP head `Z' = H W' + b'`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; the trunk collapses to a linear map.
    Identity,
}

impl Activation {
    fn apply(self, s: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => s.mapv(f64::tanh),
            Activation::Identity => s.clone(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Identity => Array2::ones(a.raw_dim()),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

/// Fully-connected layer `y = x W + b` with `W` stored as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn fan_in_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || dist.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameters (or gradients) of a two-head network, in declaration order:
/// trunk layers, then the ML head, then the SCCP head.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub trunk: Vec<Dense>,
    pub head_ml: Dense,
    pub head_sccp: Dense,
}

impl Params {
    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.head_ml, &self.head_sccp])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain([&mut self.head_ml, &mut self.head_sccp])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self
                .trunk
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
            head_ml: Dense::zeros(self.head_ml.inputs(), self.head_ml.outputs()),
            head_sccp: Dense::zeros(self.head_sccp.inputs(), self.head_sccp.outputs()),
        }
    }

    pub fn len(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values flattened in declaration order (weight before bias, row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Overwrites all values from a flat vector produced by [`Params::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in self.layers_mut() {
            layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Visits matching (parameter, other) value pairs in declaration order.
    fn zip_mut_with(&mut self, other: &Params, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.zip_mut_with(&b.weight, |x, &y| f(x, y));
            a.bias.zip_mut_with(&b.bias, |x, &y| f(x, y));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Layer widths of a two-head network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    /// Width of the shared features `H`.
    pub fn latent_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Shared trunk with two linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadMlp {
    pub params: Params,
    pub activation: Activation,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    inputs: Array2<f64>,
    /// Output of each trunk layer after the nonlinearity.
    activations: Vec<Array2<f64>>,
    pub z_ml: Array2<f64>,
    pub z_sccp: Array2<f64>,
}

impl ForwardPass {
    /// The shared features `H` (the inputs when the trunk is empty).
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().unwrap_or(&self.inputs)
    }
}

impl TwoHeadMlp {
    /// Fan-in scaled uniform initialization, heads drawn independently.
    pub fn new(arch: &Architecture, activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.input_dim;
        for &h in &arch.hidden {
            trunk.push(Dense::fan_in_uniform(width, h, rng));
            width = h;
        }
        Ok(Self {
            params: Params {
                trunk,
                head_ml: Dense::fan_in_uniform(width, arch.classes, rng),
                head_sccp: Dense::fan_in_uniform(width, arch.classes, rng),
            },
            activation,
        })
    }

    pub fn zeros(arch: &Architecture, activation: Activation) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut width = arch.input_dim;
        for &h in &arch.hidden {
            trunk.push(Dense::zeros(width, h));
            width = h;
        }
        Ok(Self {
            params: Params {
                trunk,
                head_ml: Dense::zeros(width, arch.classes),
                head_sccp: Dense::zeros(width, arch.classes),
            },
            activation,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self
                .params
                .trunk
                .first()
                .unwrap_or(&self.params.head_ml)
                .inputs(),
            hidden: self.params.trunk.iter().map(Dense::outputs).collect(),
            classes: self.params.head_ml.outputs(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        let expected = self.architecture().input_dim;
        if x.ncols() != expected {
            return Err(Error::Shape(format!(
                "inputs have {} features, model expects {expected}",
                x.ncols()
            )));
        }
        let mut activations = Vec::with_capacity(self.params.trunk.len());
        for layer in &self.params.trunk {
            let prev = activations.last().map_or(x.view(), |a: &Array2<f64>| a.view());
            let out = self.activation.apply(&layer.forward(&prev));
            activations.push(out);
        }
        let h = activations.last().map_or(x.view(), |a| a.view());
        let z_ml = self.params.head_ml.forward(&h);
        let z_sccp = self.params.head_sccp.forward(&h);
        Ok(ForwardPass {
            inputs: x.to_owned(),
            activations,
            z_ml,
            z_sccp,
        })
    }

    /// Backpropagates logit gradients of both heads; the trunk receives
    /// their sum.
    pub fn backward(&self, pass: &ForwardPass, grad_ml: &Array2<f64>, grad_sccp: &Array2<f64>) -> Result<Params> {
        if grad_ml.dim() != pass.z_ml.dim() || grad_sccp.dim() != pass.z_sccp.dim() {
            return Err(Error::Shape(format!(
                "head gradients {:?} / {:?} do not match logits {:?}",
                grad_ml.dim(),
                grad_sccp.dim(),
                pass.z_ml.dim()
            )));
        }
        let mut grads = self.params.zeros_like();
        let h = pass.features();
        grads.head_ml.weight = h.t().dot(grad_ml);
        grads.head_ml.bias = grad_ml.sum_axis(Axis(0));
        grads.head_sccp.weight = h.t().dot(grad_sccp);
        grads.head_sccp.bias = grad_sccp.sum_axis(Axis(0));

        let mut upstream = grad_ml.dot(&self.params.head_ml.weight.t())
            + grad_sccp.dot(&self.params.head_sccp.weight.t());
        for l in (0..self.params.trunk.len()).rev() {
            let out = &pass.activations[l];
            let delta = upstream * self.activation.derivative_from_output(out);
            let input = if l == 0 { &pass.inputs } else { &pass.activations[l - 1] };
            grads.trunk[l].weight = input.t().dot(&delta);
            grads.trunk[l].bias = delta.sum_axis(Axis(0));
            upstream = delta.dot(&self.params.trunk[l].weight.t());
        }
        Ok(grads)
    }
}

/// SGD with Nesterov momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(model: &TwoHeadMlp, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params.zeros_like(),
        }
    }

    /// `g += wd * p; v = mu * v + g; p -= lr * (g + mu * v)`.
    pub fn step(&mut self, model: &mut TwoHeadMlp, grads: &Params, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient; training aborted".into()));
        }
        let mut g = grads.clone();
        let wd = self.weight_decay;
        if wd != 0.0 {
            g.zip_mut_with(&model.params, |gi, p| *gi += wd * p);
        }
        let mu = self.momentum;
        self.velocity.zip_mut_with(&g, |v, gi| *v = mu * *v + gi);
        // g <- g + mu * v
        g.zip_mut_with(&self.velocity, |gi, v| *gi += mu * v);
        model.params.zip_mut_with(&g, |p, d| *p -= lr * d);
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AVGKCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Best model snapshot with its validation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TwoHeadMlp,
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub lambda_val: f64,
    pub k_target: usize,
    pub seed: u64,
}

impl Checkpoint {
    /// Binary layout, little-endian:
    /// magic `AVGKCKPT`, version u32, activation u8, layer-dim count u32,
    /// layer dims u32..., seed u64, epoch u64, K u32, best val accuracy f64,
    /// lambda_val f64, parameter count u64, parameters f64...
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.architecture();
        let dims: Vec<usize> = std::iter::once(arch.input_dim)
            .chain(arch.hidden.iter().copied())
            .chain(std::iter::once(arch.classes))
            .collect();
        let params = self.model.params.to_flat();
        let mut out = Vec::with_capacity(64 + 4 * dims.len() + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.model.activation.code());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.k_target as u32).to_le_bytes());
        out.extend_from_slice(&self.best_val_accuracy.to_le_bytes());
        out.extend_from_slice(&self.lambda_val.to_le_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut code = [0u8; 1];
        read_exact(&mut r, &mut code)?;
        let activation = Activation::from_code(code[0])?;
        let n_dims = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)? as usize;
        let k_target = read_u32(&mut r)? as usize;
        let best_val_accuracy = read_f64(&mut r)?;
        let lambda_val = read_f64(&mut r)?;
        let n_params = read_u64(&mut r)? as usize;
        let arch = Architecture {
            input_dim: dims[0],
            hidden: dims[1..n_dims - 1].to_vec(),
            classes: dims[n_dims - 1],
        };
        let mut model = TwoHeadMlp::zeros(&arch, activation)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if n_params != model.param_count() {
            return Err(Error::Checkpoint(format!(
                "{n_params} parameters stored, architecture needs {}",
                model.param_count()
            )));
        }
        let params = (0..n_params)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        model.params.set_flat(&params)?;
        Ok(Self {
            model,
            epoch,
            best_val_accuracy,
            lambda_val,
            k_target,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
