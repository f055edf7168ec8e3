//! Run configuration file. Every key has a default; unknown keys are errors.

use std::path::Path;

use rca_core::data::{FeatureTransform, ValueKind};
use rca_core::losses::LossWeights;
use rca_core::model::{Alignment, ModelConfig};
use rca_core::train::TrainConfig;
use rca_core::vat::VatConfig;
use rca_core::{RcaError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub shared_dim: usize,
    pub private_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub dropout_rate: f64,
    pub alignment: Alignment,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::amazon(1);
        ModelSection {
            input_dim: m.input_dim,
            shared_dim: m.shared_dim,
            private_dim: m.private_dim,
            extractor_hidden: m.extractor_hidden,
            classifier_hidden: m.classifier_hidden,
            discriminator_hidden: m.discriminator_hidden,
            dropout_rate: m.dropout_rate,
            alignment: m.alignment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_d: f64,
    pub lambda_uvt: f64,
    pub lambda_lvt: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub feature_transform: FeatureTransform,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda_d: t.loss_weights.lambda_d,
            lambda_uvt: t.loss_weights.lambda_uvt,
            lambda_lvt: t.loss_weights.lambda_lvt,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            feature_transform: t.feature_transform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatSection {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
}

impl Default for VatSection {
    fn default() -> Self {
        let v = VatConfig::default();
        VatSection {
            epsilon: v.epsilon,
            xi: v.xi,
            power_iterations: v.power_iterations,
        }
    }
}

/// How feature values in the data files are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMode {
    /// `real` when the data directory holds a `scenario.json`, else `counts`.
    #[default]
    Auto,
    Counts,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Cross-validation folds; ignored when every domain has `test.tsv`.
    pub folds: usize,
    /// Write an extra checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub values: ValueMode,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            folds: 5,
            checkpoint_every: 0,
            values: ValueMode::Auto,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub vat: VatSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RcaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RcaError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| RcaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, num_domains: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_domains,
            input_dim: m.input_dim,
            shared_dim: m.shared_dim,
            private_dim: m.private_dim,
            extractor_hidden: m.extractor_hidden.clone(),
            classifier_hidden: m.classifier_hidden,
            discriminator_hidden: m.discriminator_hidden,
            dropout_rate: m.dropout_rate,
            alignment: m.alignment,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss_weights: LossWeights {
                lambda_d: t.lambda_d,
                lambda_uvt: t.lambda_uvt,
                lambda_lvt: t.lambda_lvt,
            },
            vat: VatConfig {
                epsilon: self.vat.epsilon,
                xi: self.vat.xi,
                power_iterations: self.vat.power_iterations,
            },
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            feature_transform: t.feature_transform,
        }
    }

    /// Mirrors a core model/training pair back into file form.
    pub fn from_parts(model: &ModelConfig, train: &TrainConfig) -> Self {
        RunConfig {
            model: ModelSection {
                input_dim: model.input_dim,
                shared_dim: model.shared_dim,
                private_dim: model.private_dim,
                extractor_hidden: model.extractor_hidden.clone(),
                classifier_hidden: model.classifier_hidden,
                discriminator_hidden: model.discriminator_hidden,
                dropout_rate: model.dropout_rate,
                alignment: model.alignment,
            },
            train: TrainSection {
                lambda_d: train.loss_weights.lambda_d,
                lambda_uvt: train.loss_weights.lambda_uvt,
                lambda_lvt: train.loss_weights.lambda_lvt,
                learning_rate: train.learning_rate,
                batch_size: train.batch_size,
                epochs: train.epochs,
                seed: train.seed,
                adam_beta1: train.adam_beta1,
                adam_beta2: train.adam_beta2,
                adam_eps: train.adam_eps,
                feature_transform: train.feature_transform,
            },
            vat: VatSection {
                epsilon: train.vat.epsilon,
                xi: train.vat.xi,
                power_iterations: train.vat.power_iterations,
            },
            run: RunSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        self.train_config().validate()?;
        if self.run.folds < 2 {
            return Err(RcaError::Config("run.folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn value_kind(&self, data_dir: &Path) -> ValueKind {
        match self.run.values {
            ValueMode::Counts => ValueKind::Counts,
            ValueMode::Real => ValueKind::Real,
            ValueMode::Auto if data_dir.join(crate::SCENARIO_FILE).is_file() => ValueKind::Real,
            ValueMode::Auto => ValueKind::Counts,
        }
    }
}
