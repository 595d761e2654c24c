//! Central finite differences against the analytic gradients.

use avgk_core::losses::{
    an_loss, avgk_loss_with_candidates, bce_multilabel_loss, bce_multilabel_loss_realized, bce_pos_loss, ce_loss,
    epr_loss, AvgKConfig, EprConfig,
};
use avgk_core::math::{LabelVector, LogitMatrix};
use avgk_core::model::{Activation, Architecture, TwoHeadMlp};
use avgk_core::sccp::{propose_candidates, CandidateSetBatch};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const BATCHES: [usize; 4] = [1, 2, 4, 8];
const CLASSES: [usize; 3] = [3, 6, 12];

struct Instance {
    z: Array2<f64>,
    z2: Array2<f64>,
    y: LabelVector,
    k: usize,
}

/// Two seeds for every (|B|, L) pair: 24 instances.
fn instances() -> Vec<Instance> {
    let mut out = Vec::new();
    let normal = Normal::new(0.0, 2.0).unwrap();
    for seed in 0..2u64 {
        for &b in &BATCHES {
            for &l in &CLASSES {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + (b * 100 + l) as u64);
                let z = Array2::from_shape_fn((b, l), |_| normal.sample(&mut rng));
                let z2 = Array2::from_shape_fn((b, l), |_| normal.sample(&mut rng));
                let y = LabelVector::new((0..b).map(|_| rng.random_range(0..l)).collect());
                let k = 1 + rng.random_range(0..l - 1);
                out.push(Instance { z, z2, y, k });
            }
        }
    }
    assert!(out.len() >= 20);
    out
}

fn numeric_grad(z: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(z.dim());
    for idx in 0..z.len() {
        let (i, j) = (idx / z.ncols(), idx % z.ncols());
        let mut zp = z.clone();
        zp[[i, j]] += H;
        let mut zm = z.clone();
        zm[[i, j]] -= H;
        g[[i, j]] = (f(&zp) - f(&zm)) / (2.0 * H);
    }
    g
}

/// Norm-wise relative error, so entries that are zero analytically do not
/// divide by zero.
fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(n.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn lm(z: &Array2<f64>) -> LogitMatrix {
    LogitMatrix::new(z.clone()).unwrap()
}

fn check_single(name: &str, f: impl Fn(&Array2<f64>, &Instance) -> (f64, Array2<f64>)) {
    for (n, inst) in instances().iter().enumerate() {
        let (_, analytic) = f(&inst.z, inst);
        let numeric = numeric_grad(&inst.z, &|z| f(z, inst).0);
        let err = rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name} instance {n} ({:?}): relative error {err:e}", inst.z.dim());
    }
}

#[test]
fn ce_gradient() {
    check_single("ce", |z, i| {
        let o = ce_loss(&lm(z), &i.y).unwrap();
        (o.value, o.grad)
    });
}

#[test]
fn an_gradient() {
    check_single("an", |z, i| {
        let o = an_loss(&lm(z), &i.y).unwrap();
        (o.value, o.grad)
    });
}

#[test]
fn bce_pos_gradient() {
    check_single("bce-pos", |z, i| {
        let o = bce_pos_loss(&lm(z), &i.y).unwrap();
        (o.value, o.grad)
    });
}

#[test]
fn epr_gradient() {
    for beta in [0.01, 1.0] {
        check_single("epr", |z, i| {
            let cfg = EprConfig { beta, k_target: i.k };
            let o = epr_loss(&lm(z), &i.y, &cfg).unwrap();
            (o.value, o.grad)
        });
    }
}

fn frozen_sets(i: &Instance) -> CandidateSetBatch {
    propose_candidates(&lm(&i.z2), &i.y, i.k).unwrap()
}

#[test]
fn multilabel_bce_gradient() {
    for alpha in [0.3, 5.0] {
        check_single("bce-ml", |z, i| {
            let cfg = AvgKConfig { alpha, k_target: i.k };
            let o = bce_multilabel_loss(&lm(z), &i.y, &frozen_sets(i), &cfg).unwrap();
            (o.value, o.grad)
        });
        check_single("bce-ml-realized", |z, i| {
            let o = bce_multilabel_loss_realized(&lm(z), &i.y, &frozen_sets(i), alpha).unwrap();
            (o.value, o.grad)
        });
    }
}

#[test]
fn joint_gradient_with_frozen_sets() {
    for (n, inst) in instances().iter().enumerate() {
        let cfg = AvgKConfig {
            alpha: 0.3,
            k_target: inst.k,
        };
        let sets = frozen_sets(inst);
        let joint = |zm: &Array2<f64>, zs: &Array2<f64>| {
            avgk_loss_with_candidates(&lm(zm), &lm(zs), &inst.y, sets.clone(), &cfg).unwrap()
        };
        let out = joint(&inst.z, &inst.z2);
        let num_ml = numeric_grad(&inst.z, &|z| joint(z, &inst.z2).value);
        let num_sccp = numeric_grad(&inst.z2, &|z| joint(&inst.z, z).value);
        let (e_ml, e_sccp) = (rel_err(&out.grad_ml, &num_ml), rel_err(&out.grad_sccp, &num_sccp));
        assert!(e_ml < TOL && e_sccp < TOL, "instance {n}: ml {e_ml:e}, sccp {e_sccp:e}");
    }
}

#[test]
fn full_model_parameter_gradient() {
    let arch = Architecture {
        input_dim: 4,
        hidden: vec![8],
        classes: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = TwoHeadMlp::new(&arch, Activation::Tanh, &mut rng).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Array2::from_shape_fn((3, 4), |_| normal.sample(&mut rng));
    let y = LabelVector::new(vec![0, 3, 3]);
    let cfg = AvgKConfig {
        alpha: 0.7,
        k_target: 2,
    };

    let pass = model.forward(x.view()).unwrap();
    let sets = propose_candidates(&lm(&pass.z_sccp), &y, cfg.k_target).unwrap();
    let loss_at = |m: &TwoHeadMlp| {
        let p = m.forward(x.view()).unwrap();
        avgk_loss_with_candidates(&lm(&p.z_ml), &lm(&p.z_sccp), &y, sets.clone(), &cfg).unwrap()
    };
    let out = loss_at(&model);
    let analytic = model.backward(&pass, &out.grad_ml, &out.grad_sccp).unwrap().to_flat();

    let theta = model.params.to_flat();
    let mut numeric = vec![0.0; theta.len()];
    for p in 0..theta.len() {
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut t = theta.clone();
            t[p] += delta;
            m.params.set_flat(&t).unwrap();
            loss_at(&m).value
        };
        numeric[p] = (eval(H) - eval(-H)) / (2.0 * H);
    }
    let a = Array2::from_shape_vec((1, theta.len()), analytic).unwrap();
    let n = Array2::from_shape_vec((1, theta.len()), numeric).unwrap();
    let err = rel_err(&a, &n);
    assert!(err < TOL, "parameter gradient relative error {err:e}");
}
