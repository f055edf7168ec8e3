//! Finite-difference verification of every tape operation and every loss
//! term, used by the test suite and by `rca gradcheck`.

use rand::Rng;

use crate::autodiff::{grad_check, relative_error, Tape, Var};
use crate::error::Result;
use crate::losses::{self, JointLabel};
use crate::model::{Alignment, BoundModel, Mode, ModelConfig, RcaModel};
use crate::rng::{self, RunRng};
use crate::tensor::Tensor;
use crate::vat::{self, VatConfig};

/// Tolerance for single elementary operations.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
/// Tolerance for composite losses through whole networks.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// A named check producing a maximum relative error.
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

impl Check {
    pub fn new(name: &str, tolerance: f64, run: impl Fn() -> Result<f64> + 'static) -> Self {
        Check {
            name: name.to_string(),
            tolerance,
            run: Box::new(run),
        }
    }
}

pub fn run_checks(checks: &[Check]) -> Result<Vec<CheckResult>> {
    checks
        .iter()
        .map(|c| {
            Ok(CheckResult {
                name: c.name.clone(),
                max_rel_err: (c.run)()?,
                tolerance: c.tolerance,
            })
        })
        .collect()
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RunRng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Uniform values in `±[lo, hi)`, keeping clear of zero (and ReLU's kink).
fn away_from_zero(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RunRng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

fn random_distribution(rows: usize, cols: usize, rng: &mut RunRng) -> Tensor {
    let mut t = uniform(rows, cols, 0.2, 1.0, rng);
    for r in t.data_mut().chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry contributes.
fn weighted_sum(tape: &mut Tape<'_>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights, false);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Maximum relative error between reverse-mode parameter gradients of `f`
/// and central differences over every parameter of `model`.
pub fn model_grad_check<F>(model: &RcaModel, f: F, h: f64) -> Result<f64>
where
    F: for<'p> Fn(&RcaModel, &mut Tape<'p>, &BoundModel) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = f(model, &mut tape, &bound)?;
        let g = tape.backward(loss)?;
        bound
            .param_vars()
            .iter()
            .zip(model.named_params())
            .map(|(&v, (_, _, t))| g.get_or_zeros(v, t.len()))
            .collect()
    };
    let eval = |m: &RcaModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let loss = f(m, &mut tape, &bound)?;
        Ok(tape.scalar(loss))
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let count = analytic.len();
    for p in 0..count {
        for i in 0..analytic[p].len() {
            let orig = probe.params_mut()[p].1.data()[i];
            probe.params_mut()[p].1.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.params_mut()[p].1.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.params_mut()[p].1.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[p][i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but with the model's parameters bound on each tape.
pub fn input_grad_check<F>(model: &RcaModel, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &BoundModel, Var) -> Result<Var>,
{
    let eval = |probe: &Tensor, track: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(probe, track);
        let loss = f(&mut tape, &bound, xv)?;
        let value = tape.scalar(loss);
        let grad = if track {
            tape.backward(loss)?.get_or_zeros(xv, probe.len())
        } else {
            Vec::new()
        };
        Ok((value, grad))
    };
    let (_, analytic) = eval(x, true)?;
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe, false)?.0;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe, false)?.0;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(*a, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Small architecture used for whole-model checks.
pub fn check_model(num_domains: usize, seed: u64) -> Result<RcaModel> {
    let mut model = RcaModel::init(
        ModelConfig {
            num_domains,
            input_dim: 4,
            shared_dim: 3,
            private_dim: 2,
            extractor_hidden: vec![5],
            classifier_hidden: 4,
            discriminator_hidden: 3,
            dropout_rate: 0.4,
            alignment: Alignment::Joint,
        },
        seed,
    )?;
    // Nonzero biases keep hidden units away from ReLU kinks at the probe point.
    let mut rng = rng::stream(seed, 77);
    for (_, t) in model.params_mut() {
        if t.shape()[0] == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(0.2..0.6);
            }
        }
    }
    Ok(model)
}

/// The full release suite: every elementary operation, then every loss
/// through the model.
pub fn standard_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    let seed = 20240601;

    checks.push(Check::new("matmul (left)", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 1);
        let a = uniform(3, 4, -1.0, 1.0, &mut rng);
        let b = uniform(4, 2, -1.0, 1.0, &mut rng);
        let w = uniform(3, 2, 0.5, 1.5, &mut rng);
        grad_check(
            |t, x| {
                let bv = t.leaf(&b, false);
                let y = t.matmul(x, bv)?;
                weighted_sum(t, y, &w)
            },
            &a,
            STEP,
        )
    }));
    checks.push(Check::new("matmul (right)", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 2);
        let a = uniform(3, 4, -1.0, 1.0, &mut rng);
        let b = uniform(4, 2, -1.0, 1.0, &mut rng);
        let w = uniform(3, 2, 0.5, 1.5, &mut rng);
        grad_check(
            |t, x| {
                let av = t.leaf(&a, false);
                let y = t.matmul(av, x)?;
                weighted_sum(t, y, &w)
            },
            &b,
            STEP,
        )
    }));
    checks.push(Check::new("add_row", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 3);
        let a = uniform(3, 4, -1.0, 1.0, &mut rng);
        let bias = uniform(1, 4, -1.0, 1.0, &mut rng);
        let w = uniform(3, 4, 0.5, 1.5, &mut rng);
        let via_a = grad_check(
            |t, x| {
                let bv = t.leaf(&bias, false);
                let y = t.add_row(x, bv)?;
                let sq = t.mul(y, y)?;
                weighted_sum(t, sq, &w)
            },
            &a,
            STEP,
        )?;
        let via_b = grad_check(
            |t, x| {
                let av = t.leaf(&a, false);
                let y = t.add_row(av, x)?;
                let sq = t.mul(y, y)?;
                weighted_sum(t, sq, &w)
            },
            &bias,
            STEP,
        )?;
        Ok(via_a.max(via_b))
    }));
    checks.push(Check::new("add/sub/mul/scale", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 4);
        let a = uniform(2, 3, -1.0, 1.0, &mut rng);
        let b = uniform(2, 3, -1.0, 1.0, &mut rng);
        let w = uniform(2, 3, 0.5, 1.5, &mut rng);
        grad_check(
            |t, x| {
                let bv = t.leaf(&b, false);
                let s = t.add(x, bv)?;
                let d = t.sub(x, bv)?;
                let p = t.mul(s, d)?;
                let y = t.scale(p, -1.7);
                weighted_sum(t, y, &w)
            },
            &a,
            STEP,
        )
    }));
    checks.push(Check::new("relu", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 5);
        let mut x = away_from_zero(3, 4, 0.1, 1.0, &mut rng);
        x.data_mut()[0] = -0.5;
        x.data_mut()[1] = 0.5;
        let w = uniform(3, 4, 0.5, 1.5, &mut rng);
        grad_check(
            |t, v| {
                let y = t.relu(v);
                let sq = t.mul(y, y)?;
                weighted_sum(t, sq, &w)
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("log_softmax", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 6);
        let x = uniform(3, 4, -2.0, 2.0, &mut rng);
        let w = uniform(3, 4, 0.5, 1.5, &mut rng);
        grad_check(
            |t, v| {
                let y = t.log_softmax(v);
                weighted_sum(t, y, &w)
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("softmax", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 7);
        let x = uniform(3, 4, -2.0, 2.0, &mut rng);
        let w = uniform(3, 4, -1.5, 1.5, &mut rng);
        grad_check(
            |t, v| {
                let y = t.softmax(v);
                weighted_sum(t, y, &w)
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("exp/log", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 8);
        let x = uniform(2, 3, 0.3, 2.0, &mut rng);
        let w = uniform(2, 3, 0.5, 1.5, &mut rng);
        grad_check(
            |t, v| {
                let l = t.log_clamped(v, losses::LOG_FLOOR);
                let e = t.exp(v);
                let y = t.mul(l, e)?;
                weighted_sum(t, y, &w)
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("concat/vstack", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 9);
        let a = uniform(2, 3, -1.0, 1.0, &mut rng);
        let b = uniform(2, 2, -1.0, 1.0, &mut rng);
        let w = uniform(4, 3, 0.5, 1.5, &mut rng);
        grad_check(
            |t, x| {
                let bv = t.leaf(&b, false);
                let c = t.concat(x, bv)?;
                let sq = t.mul(c, c)?;
                let left = t.leaf(&Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.5, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 0.0, 0.0]])?, false);
                let proj = t.matmul(sq, left)?;
                let stacked = t.vstack(proj, x)?;
                weighted_sum(t, stacked, &w)
            },
            &a,
            STEP,
        )
    }));
    checks.push(Check::new("gather/sum", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 10);
        let x = uniform(4, 3, -1.0, 1.0, &mut rng);
        grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let g = t.gather(sq, &[0, 2, 1, 2])?;
                let s = t.sum(g);
                let m = t.mean(v);
                t.add(s, m)
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("dropout (fixed mask)", SMOOTH_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 11);
        let x = uniform(4, 5, -1.0, 1.0, &mut rng);
        let w = uniform(4, 5, 0.5, 1.5, &mut rng);
        grad_check(
            |t, v| {
                let mut mask_rng = rng::stream(seed, 12);
                let d = t.dropout(v, 0.4, &mut mask_rng, true)?;
                let sq = t.mul(d, v)?;
                weighted_sum(t, sq, &w)
            },
            &x,
            STEP,
        )
    }));

    checks.push(Check::new("classification loss (probs)", COMPOSITE_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 20);
        let logits = uniform(5, 2, -2.0, 2.0, &mut rng);
        grad_check(
            |t, v| {
                let p = t.softmax(v);
                losses::classification_loss(t, p, &[0, 1, 1, 0, 1])
            },
            &logits,
            STEP,
        )
    }));
    checks.push(Check::new("joint adversarial loss", COMPOSITE_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 21);
        let logits = uniform(4, 4, -2.0, 2.0, &mut rng);
        let labels = [JointLabel(0), JointLabel(3), JointLabel(1), JointLabel(2)];
        grad_check(
            |t, v| {
                let p = t.softmax(v);
                losses::joint_adversarial_loss(t, p, &labels)
            },
            &logits,
            STEP,
        )
    }));
    checks.push(Check::new("entropy loss", COMPOSITE_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 22);
        let logits = uniform(5, 2, -2.0, 2.0, &mut rng);
        grad_check(
            |t, v| {
                let p = t.softmax(v);
                losses::entropy_loss(t, p)
            },
            &logits,
            STEP,
        )
    }));
    checks.push(Check::new("kl divergence (both arguments)", COMPOSITE_TOLERANCE, move || {
        let mut rng = rng::stream(seed, 23);
        let p = random_distribution(4, 2, &mut rng);
        let logits = uniform(4, 2, -2.0, 2.0, &mut rng);
        let wrt_q = grad_check(
            |t, v| {
                let pv = t.leaf(&p, false);
                let q = t.softmax(v);
                losses::kl_divergence(t, pv, q)
            },
            &logits,
            STEP,
        )?;
        let q = random_distribution(4, 2, &mut rng);
        let wrt_p = grad_check(
            |t, v| {
                let pp = t.softmax(v);
                let qv = t.leaf(&q, false);
                losses::kl_divergence(t, pp, qv)
            },
            &logits,
            STEP,
        )?;
        Ok(wrt_q.max(wrt_p))
    }));

    checks.push(Check::new("classifier loss w.r.t. parameters", COMPOSITE_TOLERANCE, move || {
        let model = check_model(2, seed)?;
        let mut rng = rng::stream(seed, 30);
        let x = uniform(1, 4, 0.0, 2.0, &mut rng);
        model_grad_check(
            &model,
            |_, t, b| {
                let xv = t.leaf(&x, false);
                let p = b.classifier_probs(t, xv, 1, &mut Mode::Eval)?;
                losses::classification_loss(t, p, &[1])
            },
            STEP,
        )
    }));
    checks.push(Check::new("classifier loss w.r.t. input", COMPOSITE_TOLERANCE, move || {
        let model = check_model(2, seed)?;
        let mut rng = rng::stream(seed, 31);
        let x = uniform(1, 4, 0.0, 2.0, &mut rng);
        input_grad_check(
            &model,
            |t, b, v| {
                let p = b.classifier_probs(t, v, 0, &mut Mode::Eval)?;
                losses::classification_loss(t, p, &[0])
            },
            &x,
            STEP,
        )
    }));
    checks.push(Check::new("training-mode losses (fixed dropout)", COMPOSITE_TOLERANCE, move || {
        let model = check_model(2, seed)?;
        let mut rng = rng::stream(seed, 32);
        let xl = uniform(3, 4, 0.0, 2.0, &mut rng);
        let xu = uniform(2, 4, 0.0, 2.0, &mut rng);
        model_grad_check(
            &model,
            |_, t, b| {
                let mut drop = rng::stream(seed, 33);
                let xlv = t.leaf(&xl, false);
                let xuv = t.leaf(&xu, false);
                let sl = b.shared_features(t, xlv, &mut Mode::Train(&mut drop))?;
                let pl = b.private_features(t, xlv, 1, &mut Mode::Train(&mut drop))?;
                let probs = b.classify(t, sl, pl, &mut Mode::Train(&mut drop))?;
                let lc = losses::classification_loss(t, probs, &[0, 1, 1])?;
                let su = b.shared_features(t, xuv, &mut Mode::Train(&mut drop))?;
                let pu = b.private_features(t, xuv, 1, &mut Mode::Train(&mut drop))?;
                let probs_u = b.classify(t, su, pu, &mut Mode::Train(&mut drop))?;
                let le = losses::entropy_loss(t, probs_u)?;
                let s_all = t.vstack(sl, su)?;
                let d = b.discriminate(t, s_all, &mut Mode::Train(&mut drop))?;
                let labels = [JointLabel(1), JointLabel(3), JointLabel(3), JointLabel(1), JointLabel(3)];
                let ld = losses::joint_adversarial_loss(t, d, &labels)?;
                let neg = t.scale(ld, -0.5);
                let total = t.add(lc, neg)?;
                t.add(total, le)
            },
            STEP,
        )
    }));
    checks.push(Check::new("vat loss, detached anchor", COMPOSITE_TOLERANCE, move || {
        let model = check_model(2, seed)?;
        let mut rng = rng::stream(seed, 40);
        let x = uniform(3, 4, 0.0, 2.0, &mut rng);
        let cfg = VatConfig {
            epsilon: 0.5,
            ..Default::default()
        };
        let r = vat::vat_perturbation(&model, &x, 0, &cfg, &mut rng)?;
        vat_detached_anchor_error(&model, &x, 0, &r, STEP)
    }));
    checks
}

/// Compares the parameter gradient of [`vat::vat_loss`] with central
/// differences of `θ ↦ KL(p₀ ‖ f_θ(x + r))`, where `p₀` is frozen at the
/// unperturbed parameters.
pub fn vat_detached_anchor_error(model: &RcaModel, x: &Tensor, domain: usize, r: &Tensor, h: f64) -> Result<f64> {
    let anchor = model.forward_classifier(x, domain)?;
    let shifted = {
        let mut data = x.data().to_vec();
        data.iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
        Tensor::new(x.shape().to_vec(), data)?
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(x, false);
        let loss = vat::vat_loss(&mut tape, &bound, xv, domain, r)?;
        let g = tape.backward(loss)?;
        bound
            .param_vars()
            .iter()
            .zip(model.named_params())
            .map(|(&v, (_, _, t))| g.get_or_zeros(v, t.len()))
            .collect()
    };
    let frozen_anchor = |m: &RcaModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(&shifted, false);
        let q = bound.classifier_probs(&mut tape, xv, domain, &mut Mode::Eval)?;
        let p = tape.leaf(&anchor, false);
        let l = losses::kl_divergence(&mut tape, p, q)?;
        Ok(tape.scalar(l))
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for p in 0..analytic.len() {
        for i in 0..analytic[p].len() {
            let orig = probe.params_mut()[p].1.data()[i];
            probe.params_mut()[p].1.data_mut()[i] = orig + h;
            let up = frozen_anchor(&probe)?;
            probe.params_mut()[p].1.data_mut()[i] = orig - h;
            let down = frozen_anchor(&probe)?;
            probe.params_mut()[p].1.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[p][i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_suite_passes() {
        for r in run_checks(&standard_checks()).unwrap() {
            assert!(r.passed(), "{}: {:e} >= {:e}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        // x² with a backward rule of x instead of 2x
        let bad = Check::new("broken square", COMPOSITE_TOLERANCE, || {
            let x = Tensor::from_rows(&[[0.3, -1.2, 2.0]])?;
            grad_check(
                |t, v| {
                    let (r, c) = t.dims(v);
                    let sq: Vec<f64> = t.value(v).iter().map(|a| a * a).collect();
                    let y = t.custom(&[v], r, c, sq, Box::new(|g, inputs| vec![g.iter().zip(inputs[0]).map(|(g, a)| g * a).collect()]))?;
                    Ok(t.sum(y))
                },
                &x,
                STEP,
            )
        });
        let res = run_checks(&[bad]).unwrap();
        assert!(!res[0].passed());
    }
}
