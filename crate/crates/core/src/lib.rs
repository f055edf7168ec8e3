//! Multi-domain text classification with regularized conditional
//! alignment.
//!
//! A shared feature extractor is trained adversarially against a
//! discriminator over joint (sentiment, domain) labels, so that features
//! are aligned per class rather than only per domain. Private extractors
//! keep domain-specific signal, and entropy minimisation plus virtual
//! adversarial training regularise the classifier on unlabeled data.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! matrices ([`autodiff`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vat;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use data::{kfold_split, load_domain, DomainDataset, FoldSpec, SparseVector};
pub use error::{RcaError, Result};
pub use losses::{build_joint_label, JointLabel, LossWeights};
pub use model::{Alignment, Component, Mode, ModelConfig, RcaModel};
pub use synthetic::{generate_synthetic, SyntheticScenario};
pub use tensor::Tensor;
pub use train::{evaluate, fit, train_step, StepMetrics, TrainConfig};
pub use vat::{vat_loss, vat_perturbation, VatConfig};
