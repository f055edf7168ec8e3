//! Loss terms over probability tensors.
//!
//! Every loss is a batch mean; callers sum the per-domain values. Logs are
//! taken as `ln(max(p, LOG_FLOOR))` so saturated softmax outputs stay finite.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{RcaError, Result};

pub const LOG_FLOOR: f64 = 1e-12;

pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

/// Index into the `2M` joint (sentiment, domain) categories: positives
/// occupy `[0, M)`, negatives `[M, 2M)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointLabel(pub usize);

pub fn build_joint_label(domain: usize, sentiment: usize, num_domains: usize) -> Result<JointLabel> {
    if domain >= num_domains {
        return Err(RcaError::Usage(format!(
            "domain {domain} out of range for {num_domains} domains"
        )));
    }
    match sentiment {
        POSITIVE => Ok(JointLabel(domain)),
        NEGATIVE => Ok(JointLabel(num_domains + domain)),
        s => Err(RcaError::Usage(format!("sentiment must be 0 or 1, got {s}"))),
    }
}

/// Weights of the regularisers in the min-player objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_uvt: f64,
    pub lambda_lvt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.5,
            lambda_uvt: 1.0,
            lambda_lvt: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_uvt", self.lambda_uvt),
            ("lambda_lvt", self.lambda_lvt),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RcaError::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean of `-ln p[label]` over rows.
pub fn cross_entropy(tape: &mut Tape<'_>, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, _) = tape.dims(probs);
    if n == 0 {
        return Err(RcaError::Usage("cross-entropy over an empty batch".into()));
    }
    let logp = tape.log_clamped(probs, LOG_FLOOR);
    let picked = tape.gather(logp, labels)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Sentiment cross-entropy over `[n×2]` probabilities.
pub fn classification_loss(tape: &mut Tape<'_>, probs: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, probs, labels)
}

/// Discriminator cross-entropy against joint (or, for the marginal
/// ablation, plain domain) labels.
pub fn joint_adversarial_loss(tape: &mut Tape<'_>, dprobs: Var, labels: &[JointLabel]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|l| l.0).collect();
    cross_entropy(tape, dprobs, &idx)
}

/// Mean of `-pᵀ ln p` over rows.
pub fn entropy_loss(tape: &mut Tape<'_>, probs: Var) -> Result<Var> {
    let (n, _) = tape.dims(probs);
    if n == 0 {
        return Err(RcaError::Usage("entropy over an empty batch".into()));
    }
    let logp = tape.log_clamped(probs, LOG_FLOOR);
    let plogp = tape.mul(probs, logp)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Mean over rows of `Σ p ln(p / q)`.
pub fn kl_divergence(tape: &mut Tape<'_>, p: Var, q: Var) -> Result<Var> {
    let (n, _) = tape.dims(p);
    if n == 0 {
        return Err(RcaError::Usage("KL divergence over an empty batch".into()));
    }
    let lp = tape.log_clamped(p, LOG_FLOOR);
    let lq = tape.log_clamped(q, LOG_FLOOR);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn eval(rows: &[[f64; 2]], f: impl Fn(&mut Tape<'_>, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::from_rows(rows).unwrap(), false);
        let out = f(&mut tape, p).unwrap();
        tape.scalar(out)
    }

    fn kl(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
        let mut tape = Tape::new();
        let pv = tape.leaf(&Tensor::from_rows(p).unwrap(), false);
        let qv = tape.leaf(&Tensor::from_rows(q).unwrap(), false);
        let out = kl_divergence(&mut tape, pv, qv).unwrap();
        tape.scalar(out)
    }

    #[test]
    fn joint_label_layout() {
        assert_eq!(build_joint_label(0, POSITIVE, 4).unwrap(), JointLabel(0));
        assert_eq!(build_joint_label(0, NEGATIVE, 4).unwrap(), JointLabel(4));
        assert_eq!(build_joint_label(3, NEGATIVE, 4).unwrap(), JointLabel(7));
        assert_eq!(build_joint_label(0, POSITIVE, 1).unwrap(), JointLabel(0));
        assert_eq!(build_joint_label(0, NEGATIVE, 1).unwrap(), JointLabel(1));
        assert!(build_joint_label(4, POSITIVE, 4).is_err());
        assert!(build_joint_label(0, 2, 4).is_err());
    }

    #[test]
    fn classification_loss_values() {
        let ce = |rows: &[[f64; 2]], labels: &[usize]| eval(rows, |t, p| classification_loss(t, p, labels));
        assert!((ce(&[[0.5, 0.5]], &[0]) - LN_2).abs() < 1e-15);
        assert!(ce(&[[1.0, 0.0]], &[0]).abs() < 1e-12);
        assert!((ce(&[[0.5, 0.5], [1.0, 0.0]], &[0, 0]) - 0.346574).abs() < 1e-6);
        // saturated wrong prediction is clamped rather than infinite
        assert!((ce(&[[1.0, 0.0]], &[1]) + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_values() {
        assert!((eval(&[[0.5, 0.5]], entropy_loss) - LN_2).abs() < 1e-12);
        assert_eq!(eval(&[[1.0, 0.0]], entropy_loss), 0.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert!((eval(&[[0.9, 0.1]], entropy_loss) - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl(&[[0.3, 0.7]], &[[0.3, 0.7]]), 0.0);
        assert!((kl(&[[1.0, 0.0]], &[[0.5, 0.5]]) - LN_2).abs() < 1e-12);
        assert!((kl(&[[0.5, 0.5]], &[[0.9, 0.1]]) - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn adversarial_uniform_is_ln_classes() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::new(vec![3, 8], vec![0.125; 24]).unwrap(), false);
        let labels = [JointLabel(0), JointLabel(5), JointLabel(7)];
        let l = joint_adversarial_loss(&mut tape, p, &labels).unwrap();
        assert!((tape.scalar(l) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::zeros(vec![0, 2]), false);
        assert!(entropy_loss(&mut tape, p).is_err());
        assert!(cross_entropy(&mut tape, p, &[]).is_err());
    }

    proptest! {
        #[test]
        fn joint_label_is_bijective(m in 1usize..=8) {
            let mut seen = vec![false; 2 * m];
            for d in 0..m {
                for s in [POSITIVE, NEGATIVE] {
                    let JointLabel(i) = build_joint_label(d, s, m).unwrap();
                    prop_assert!(i < 2 * m);
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                    prop_assert_eq!(i < m, s == POSITIVE);
                }
            }
            prop_assert!(seen.iter().all(|&b| b));
        }

        #[test]
        fn entropy_bounded(a in 0.0f64..=1.0) {
            let h = eval(&[[a, 1.0 - a]], entropy_loss);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= LN_2 + 1e-15);
        }

        #[test]
        fn kl_nonnegative(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            let d = kl(&[[a, 1.0 - a]], &[[b, 1.0 - b]]);
            prop_assert!(d >= -1e-15);
        }
    }
}
