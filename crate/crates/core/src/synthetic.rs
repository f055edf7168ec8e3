//! Class-conditional Gaussian domains for controlled alignment experiments.
//!
//! Each domain draws latent points from `N(μ_class, diag(σ²))` with the
//! covariance shared by both classes. A latent coordinate `g` is emitted as
//! the two nonnegative features `max(g, 0)` and `max(-g, 0)`, so a latent
//! dimension `d` becomes an input dimension `2d` in the sparse format. The
//! encoding is invertible, so the Bayes accuracy of the latent problem is
//! the Bayes accuracy of the emitted data. With a shared covariance, class
//! priors `π` and `1-π`, `Δ` the Mahalanobis distance between the class
//! means and `L = ln(π/(1-π))`, it is
//! `π·Φ(Δ/2 + L/Δ) + (1-π)·Φ(Δ/2 - L/Δ)`, which is `Φ(Δ/2)` at equal priors.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{DomainDataset, SparseVector};
use crate::error::{RcaError, Result};
use crate::losses::{LossWeights, NEGATIVE, POSITIVE};
use crate::model::{Alignment, ModelConfig};
use crate::rng::{self, RunRng};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDomain {
    pub name: String,
    pub positive_mean: Vec<f64>,
    pub negative_mean: Vec<f64>,
    /// Per-coordinate standard deviation shared by both classes.
    pub std: Vec<f64>,
    /// Prior of the positive class, in every split of this domain.
    #[serde(default = "half")]
    pub positive_fraction: f64,
    /// Overrides the scenario's labeled fraction for this domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_fraction: Option<f64>,
}

fn half() -> f64 {
    0.5
}

impl GaussianDomain {
    /// Positive and negative counts out of `n` samples.
    pub fn class_counts(&self, n: usize) -> (usize, usize) {
        let pos = (self.positive_fraction * n as f64).round() as usize;
        (pos, n - pos)
    }

    pub fn mahalanobis(&self) -> f64 {
        self.positive_mean
            .iter()
            .zip(&self.negative_mean)
            .zip(&self.std)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub domains: Vec<GaussianDomain>,
    /// Training samples per domain (labeled + unlabeled).
    pub samples_per_domain: usize,
    /// Held-out labeled samples per domain.
    pub test_per_domain: usize,
    /// Fraction of each class's training samples that keep their label.
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SyntheticScenario {
    /// Two domains sharing the class axis but with opposite polarity, the
    /// target shifted along a nuisance axis. Dropping the shift aligns the
    /// two marginals perfectly while mapping each class onto the other
    /// domain's opposite class; only a class-aware alignment avoids the
    /// flip. The target keeps five labels per class, so it depends on what
    /// the shared features carry over from the source.
    pub fn misalignment() -> Self {
        let mut source_pos = vec![1.5, 0.0];
        let mut source_neg = vec![-1.5, 0.0];
        let mut target_pos = vec![-1.5, 3.0];
        let mut target_neg = vec![1.5, 3.0];
        for v in [&mut source_pos, &mut source_neg, &mut target_pos, &mut target_neg] {
            v.extend([0.0; 4]);
        }
        SyntheticScenario {
            domains: vec![
                GaussianDomain {
                    name: "source".into(),
                    positive_mean: source_pos,
                    negative_mean: source_neg,
                    std: vec![1.0; 6],
                    positive_fraction: 0.5,
                    labeled_fraction: None,
                },
                GaussianDomain {
                    name: "target".into(),
                    positive_mean: target_pos,
                    negative_mean: target_neg,
                    std: vec![1.0; 6],
                    positive_fraction: 0.5,
                    labeled_fraction: Some(0.005),
                },
            ],
            samples_per_domain: 2000,
            test_per_domain: 1000,
            labeled_fraction: 0.1,
            seed: 2024,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.domains.first().map_or(0, |d| d.std.len())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.latent_dim()
    }

    /// Labeled positives and negatives of a domain's training split.
    pub fn labeled_counts(&self, d: &GaussianDomain) -> (usize, usize) {
        let (pos, neg) = d.class_counts(self.samples_per_domain);
        let frac = d.labeled_fraction.unwrap_or(self.labeled_fraction);
        let keep = |n: usize| (frac * n as f64).round() as usize;
        (keep(pos), keep(neg))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RcaError::Config(m));
        if self.domains.is_empty() {
            return bad("scenario needs at least one domain".into());
        }
        let dim = self.latent_dim();
        if dim == 0 {
            return bad("scenario latent dimension must be positive".into());
        }
        for d in &self.domains {
            if d.positive_mean.len() != dim || d.negative_mean.len() != dim || d.std.len() != dim {
                return bad(format!("domain {}: mean/std lengths must all equal {dim}", d.name));
            }
            if d.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return bad(format!("domain {}: degenerate covariance (std must be positive)", d.name));
            }
            if d.positive_mean.iter().chain(&d.negative_mean).any(|m| !m.is_finite()) {
                return bad(format!("domain {}: non-finite mean", d.name));
            }
            if d.mahalanobis() == 0.0 {
                return bad(format!("domain {}: class means coincide", d.name));
            }
            if !(d.positive_fraction > 0.0 && d.positive_fraction < 1.0) {
                return bad(format!("domain {}: positive_fraction must lie in (0, 1)", d.name));
            }
        }
        for f in std::iter::once(self.labeled_fraction).chain(self.domains.iter().filter_map(|d| d.labeled_fraction)) {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("labeled_fraction {f} outside [0, 1]"));
            }
        }
        for d in &self.domains {
            let (pos, neg) = self.labeled_counts(d);
            if pos == 0 || neg == 0 {
                return bad(format!("domain {}: needs at least one labeled sample per class", d.name));
            }
        }
        Ok(())
    }

    /// Closed-form Bayes accuracy of each domain.
    pub fn bayes_accuracy_per_domain(&self) -> Vec<f64> {
        let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
        self.domains
            .iter()
            .map(|d| {
                let delta = d.mahalanobis();
                let pi = d.positive_fraction;
                let shift = (pi / (1.0 - pi)).ln() / delta;
                pi * std_normal.cdf(delta / 2.0 + shift) + (1.0 - pi) * std_normal.cdf(delta / 2.0 - shift)
            })
            .collect()
    }

    /// Unweighted mean of the per-domain Bayes accuracies.
    pub fn bayes_accuracy(&self) -> f64 {
        let per = self.bayes_accuracy_per_domain();
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// Architecture sized for the low-dimensional synthetic scenarios.
pub fn synthetic_model_config(scenario: &SyntheticScenario) -> ModelConfig {
    ModelConfig {
        num_domains: scenario.domains.len(),
        input_dim: scenario.input_dim(),
        shared_dim: 8,
        private_dim: 2,
        extractor_hidden: vec![16],
        classifier_hidden: 8,
        discriminator_hidden: 16,
        dropout_rate: 0.1,
        alignment: Alignment::Joint,
    }
}

/// Training settings for the synthetic scenarios. Few labels per epoch
/// means many short epochs.
pub fn synthetic_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        loss_weights: LossWeights {
            lambda_d: 1.0,
            lambda_uvt: 1.0,
            lambda_lvt: 0.01,
        },
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 200,
        seed,
        ..Default::default()
    }
}

/// Generated training and held-out data plus the ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<DomainDataset>,
    pub test: Vec<DomainDataset>,
    pub bayes_accuracy: f64,
    pub bayes_accuracy_per_domain: Vec<f64>,
}

fn sample_latent(d: &GaussianDomain, class: usize, rng: &mut RunRng) -> Vec<f64> {
    let mean = if class == POSITIVE { &d.positive_mean } else { &d.negative_mean };
    mean.iter()
        .zip(&d.std)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Splits each latent coordinate into its positive and negative parts.
pub fn encode_latent(latent: &[f64]) -> SparseVector {
    let dense: Vec<f64> = latent.iter().flat_map(|&g| [g.max(0.0), (-g).max(0.0)]).collect();
    SparseVector::from_dense(&dense)
}

pub fn generate_synthetic(scenario: &SyntheticScenario) -> Result<SyntheticData> {
    scenario.validate()?;
    let input_dim = scenario.input_dim();
    let mut rng = rng::stream(scenario.seed, rng::STREAM_SYNTH);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in &scenario.domains {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let (n_pos, n_neg) = d.class_counts(scenario.samples_per_domain);
        let (l_pos, l_neg) = scenario.labeled_counts(d);
        for (class, n, keep) in [(POSITIVE, n_pos, l_pos), (NEGATIVE, n_neg, l_neg)] {
            for i in 0..n {
                let x = encode_latent(&sample_latent(d, class, &mut rng));
                if i < keep {
                    labeled.push((x, class));
                } else {
                    unlabeled.push(x);
                }
            }
        }
        labeled.shuffle(&mut rng);
        unlabeled.shuffle(&mut rng);
        let mut held_out = Vec::new();
        let (t_pos, t_neg) = d.class_counts(scenario.test_per_domain);
        for (class, n) in [(POSITIVE, t_pos), (NEGATIVE, t_neg)] {
            for _ in 0..n {
                held_out.push((encode_latent(&sample_latent(d, class, &mut rng)), class));
            }
        }
        held_out.shuffle(&mut rng);
        train.push(DomainDataset {
            name: d.name.clone(),
            input_dim,
            labeled,
            unlabeled,
        });
        test.push(DomainDataset {
            name: d.name.clone(),
            input_dim,
            labeled: held_out,
            unlabeled: Vec::new(),
        });
    }
    Ok(SyntheticData {
        train,
        test,
        bayes_accuracy: scenario.bayes_accuracy(),
        bayes_accuracy_per_domain: scenario.bayes_accuracy_per_domain(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BAYES_075: f64 = 0.944_635_172_715_218;

    #[test]
    fn labeled_fraction_arithmetic() {
        let s = SyntheticScenario::misalignment();
        let data = generate_synthetic(&s).unwrap();
        for (d, g) in data.train.iter().zip(&s.domains) {
            let (pos, neg) = s.labeled_counts(g);
            assert_eq!(d.labeled_len(), pos + neg);
            assert_eq!(d.labeled_len() + d.unlabeled_len(), s.samples_per_domain);
            assert_eq!(d.labeled.iter().filter(|(_, y)| *y == POSITIVE).count(), pos);
            d.validate().unwrap();
        }
        assert_eq!(data.test[0].labeled_len(), s.test_per_domain);
        // source: fraction 0.1 of 1000 per class
        assert_eq!(s.labeled_counts(&s.domains[0]), (100, 100));
        assert_eq!(s.labeled_counts(&s.domains[1]), (5, 5));
    }

    #[test]
    fn deterministic_under_seed() {
        let s = SyntheticScenario::misalignment();
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let mut s = SyntheticScenario::misalignment();
        s.domains[1].std[0] = 0.0;
        assert!(matches!(generate_synthetic(&s), Err(RcaError::Config(_))));
    }

    #[test]
    fn encoding_is_invertible() {
        let g = [1.25, -0.5, 0.0];
        let v = encode_latent(&g);
        let mut dense = vec![0.0; 6];
        for (&i, &x) in v.indices.iter().zip(&v.values) {
            dense[i as usize] = x;
        }
        let back: Vec<f64> = dense.chunks(2).map(|p| p[0] - p[1]).collect();
        assert_eq!(back, g);
    }

    #[test]
    fn bayes_at_equal_priors() {
        // Δ = 3 → Φ(1.5)
        let s = SyntheticScenario::misalignment();
        for acc in s.bayes_accuracy_per_domain() {
            assert!((acc - 0.933_192_798_731_141_9).abs() < 1e-9, "{acc}");
        }
    }

    #[test]
    fn bayes_with_skewed_priors() {
        // scipy: 0.75*norm.cdf(1.5 + log(3)/3) + 0.25*norm.cdf(1.5 - log(3)/3)
        let mut s = SyntheticScenario::misalignment();
        for d in &mut s.domains {
            d.positive_fraction = 0.75;
            d.std = vec![1.0; 6];
        }
        let acc = s.bayes_accuracy_per_domain()[0];
        assert!((acc - BAYES_075).abs() < 1e-9, "{acc}");
    }
}
