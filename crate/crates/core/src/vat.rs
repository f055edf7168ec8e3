//! Virtual adversarial training.
//!
//! The worst-case perturbation inside the `‖r‖ ≤ ε` ball is approximated by
//! power iteration: start from a random unit direction, take the gradient
//! of `KL(p ‖ f(x + ξ·d))` with respect to `d`, renormalise, repeat, and
//! scale the final direction to radius `ε`. Both forward passes run in eval
//! mode so the divergence measures the response to the perturbation rather
//! than to dropout noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{RcaError, Result};
use crate::losses::kl_divergence;
use crate::model::{BoundModel, Mode, RcaModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    /// Perturbation radius.
    pub epsilon: f64,
    /// Probe scale applied to the unit direction during power iteration.
    pub xi: f64,
    pub power_iterations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 1.0,
            xi: 0.1,
            power_iterations: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RcaError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(RcaError::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.power_iterations == 0 {
            return Err(RcaError::Config("power_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rescales each row of `d` to unit L2 norm. Rows with zero or non-finite
/// norm are replaced by the matching row of `fallback`.
fn normalize_rows(d: &mut [f64], cols: usize, fallback: Option<&[f64]>) {
    for (i, row) in d.chunks_mut(cols.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else if let Some(fb) = fallback {
            row.copy_from_slice(&fb[i * cols..(i + 1) * cols]);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
    }
}

/// Approximately worst-case perturbation `r` with every row of norm `ε`.
pub fn vat_perturbation<R: Rng + ?Sized>(
    model: &RcaModel,
    x: &Tensor,
    domain: usize,
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let anchor = model.forward_classifier(x, domain)?;
    let (n, cols) = x.dims2();
    let mut d: Vec<f64> = (0..n * cols).map(|_| rng.sample(StandardNormal)).collect();
    normalize_rows(&mut d, cols, None);

    for _ in 0..cfg.power_iterations {
        let dir = Tensor::new(vec![n, cols], d.clone())?;
        let g = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.leaf(x, false);
            let dv = tape.leaf(&dir, true);
            let probe = tape.scale(dv, cfg.xi);
            let shifted = tape.add(xv, probe)?;
            let q = bound.classifier_probs(&mut tape, shifted, domain, &mut Mode::Eval)?;
            let p = tape.leaf(&anchor, false);
            let loss = kl_divergence(&mut tape, p, q)?;
            tape.backward(loss)?.get_or_zeros(dv, n * cols)
        };
        let previous = d;
        d = g;
        normalize_rows(&mut d, cols, Some(&previous));
    }

    d.iter_mut().for_each(|v| *v *= cfg.epsilon);
    Tensor::new(vec![n, cols], d)
}

/// `mean KL(stop_grad(f(x)) ‖ f(x + r))` in eval mode. Gradients reach the
/// parameters only through the perturbed branch; `r` is a constant.
pub fn vat_loss(tape: &mut Tape<'_>, bound: &BoundModel, x: Var, domain: usize, r: &Tensor) -> Result<Var> {
    let anchor = bound.classifier_probs(tape, x, domain, &mut Mode::Eval)?;
    let anchor = tape.detach(anchor);
    let rv = tape.leaf(r, false);
    let shifted = tape.add(x, rv)?;
    let q = bound.classifier_probs(tape, shifted, domain, &mut Mode::Eval)?;
    kl_divergence(tape, anchor, q)
}

/// Value of [`vat_loss`] without keeping a tape around.
pub fn vat_loss_value(model: &RcaModel, x: &Tensor, domain: usize, r: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x, false);
    let l = vat_loss(&mut tape, &bound, xv, domain, r)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Alignment, ModelConfig};
    use crate::rng;

    fn model(seed: u64) -> RcaModel {
        RcaModel::init(
            ModelConfig {
                num_domains: 2,
                input_dim: 5,
                shared_dim: 4,
                private_dim: 3,
                extractor_hidden: vec![6],
                classifier_hidden: 5,
                discriminator_hidden: 4,
                dropout_rate: 0.4,
                alignment: Alignment::Joint,
            },
            seed,
        )
        .unwrap()
    }

    fn input() -> Tensor {
        Tensor::from_rows(&[[0.5, 1.0, 2.0, 0.0, 1.5], [3.0, 0.2, 0.1, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0, 1.0]]).unwrap()
    }

    #[test]
    fn rows_have_radius_epsilon() {
        let m = model(1);
        for eps in [0.01, 1.0, 3.5] {
            let cfg = VatConfig { epsilon: eps, ..Default::default() };
            let r = vat_perturbation(&m, &input(), 1, &cfg, &mut rng::stream(4, 0)).unwrap();
            for i in 0..3 {
                let norm = r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - eps).abs() < 1e-9, "{norm} vs {eps}");
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let m = model(2);
        let cfg = VatConfig::default();
        let a = vat_perturbation(&m, &input(), 0, &cfg, &mut rng::stream(9, 0)).unwrap();
        let b = vat_perturbation(&m, &input(), 0, &cfg, &mut rng::stream(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_perturbation_has_zero_loss() {
        let m = model(3);
        let r = Tensor::zeros(vec![3, 5]);
        assert_eq!(vat_loss_value(&m, &input(), 0, &r).unwrap(), 0.0);
    }

    #[test]
    fn constant_output_model_has_zero_loss() {
        let mut m = model(3);
        let last = m.classifier.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let cfg = VatConfig::default();
        let r = vat_perturbation(&m, &input(), 1, &cfg, &mut rng::stream(1, 0)).unwrap();
        assert!(vat_loss_value(&m, &input(), 1, &r).unwrap().abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(VatConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(VatConfig { xi: -1.0, ..Default::default() }.validate().is_err());
        assert!(VatConfig { power_iterations: 0, ..Default::default() }.validate().is_err());
    }
}
