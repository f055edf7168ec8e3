//! Alternating optimisation of the discriminator against the feature
//! extractors and classifier.
//!
//! Each step runs two phases on the same set of per-domain batches:
//!
//! * **Discriminator phase.** `D` takes an Adam step that decreases the
//!   discriminator cross-entropy `L_d` on labeled samples (true joint
//!   labels) and unlabeled samples (pseudo-labelled joint labels). Only
//!   `D` is tracked on the tape.
//! * **Min-player phase.** `F_s`, every `F_d^i` and `C` take an Adam step on
//!   `L_c − λ_d·L_d + λ_uvt·(L_e + L_uvt) + λ_lvt·L_lvt`. `D` is frozen; the
//!   `−λ_d·L_d` term reaches `F_s` only, since `D` never sees private
//!   features and `C` is not on the discriminator path.
//!
//! Pseudo-labels are computed once, in eval mode, at the start of a step.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DomainDataset, FeatureTransform};
use crate::error::{RcaError, Result};
use crate::losses::{self, JointLabel, LossWeights};
use crate::model::{Alignment, Component, Mode, ModelConfig, RcaModel};
use crate::optim::{adam_update, AdamParams, AdamState};
use crate::rng::{self, RunRng};
use crate::tensor::Tensor;
use crate::vat::{self, VatConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub vat: VatConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub feature_transform: FeatureTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: LossWeights::default(),
            vat: VatConfig::default(),
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            feature_transform: FeatureTransform::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.vat.validate()?;
        if self.batch_size == 0 {
            return Err(RcaError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(RcaError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RcaError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(RcaError::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One domain's contribution to a training step.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: usize,
    pub labeled_x: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled_x: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss_e: f64,
    pub loss_uvt: f64,
    pub loss_lvt: f64,
    /// Discriminator accuracy on the step's batches, before its update.
    pub disc_accuracy: f64,
    /// Classifier accuracy on each domain's labeled batch (train mode).
    pub train_accuracy: Vec<f64>,
    /// Per-domain held-out accuracy, filled on the last step of an epoch
    /// when held-out data is supplied.
    pub heldout_accuracy: Option<Vec<f64>>,
}

/// Adam state for every parameter, in [`RcaModel::named_params`] order.
#[derive(Clone, Debug)]
pub struct AdamStates {
    states: Vec<AdamState>,
}

impl AdamStates {
    pub fn new(model: &RcaModel) -> Self {
        AdamStates {
            states: model.named_params().iter().map(|(_, _, t)| AdamState::new(t.len())).collect(),
        }
    }

    pub fn state(&self, i: usize) -> &AdamState {
        &self.states[i]
    }

    fn apply(&mut self, model: &mut RcaModel, grads: &[Option<Vec<f64>>], hp: &AdamParams, select: impl Fn(Component) -> bool) -> Result<()> {
        for ((i, (c, param)), grad) in model.params_mut().into_iter().enumerate().zip(grads) {
            if !select(c) {
                continue;
            }
            let zeros;
            let g = match grad {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; param.len()];
                    &zeros
                }
            };
            adam_update(param, g, &mut self.states[i], hp)?;
        }
        Ok(())
    }
}

fn is_discriminator(c: Component) -> bool {
    c == Component::Discriminator
}

fn is_min_player(c: Component) -> bool {
    c != Component::Discriminator
}

/// Hard pseudo-labels in eval mode: the argmax class, ties to class 0.
pub fn pseudo_label(model: &RcaModel, x: &Tensor, domain: usize) -> Result<Vec<usize>> {
    Ok(model.forward_classifier(x, domain)?.argmax_rows())
}

/// Discriminator targets for one domain's rows.
pub fn discriminator_labels(alignment: Alignment, domain: usize, sentiments: &[usize], num_domains: usize) -> Result<Vec<JointLabel>> {
    sentiments
        .iter()
        .map(|&s| match alignment {
            Alignment::Joint => losses::build_joint_label(domain, s, num_domains),
            Alignment::Marginal => Ok(JointLabel(domain)),
        })
        .collect()
}

/// Labeled rows stacked over unlabeled rows, with their sentiments (true
/// labels, then pseudo-labels).
fn all_rows(batch: &DomainBatch, pseudo: Option<&Vec<usize>>) -> Result<(Tensor, Vec<usize>)> {
    let mut sentiments = batch.labels.clone();
    let x = match (&batch.unlabeled_x, pseudo) {
        (Some(u), Some(p)) => {
            sentiments.extend(p);
            Tensor::vstack(&[&batch.labeled_x, u])?
        }
        _ => batch.labeled_x.clone(),
    };
    Ok((x, sentiments))
}

fn accuracy(probs: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let t = Tensor::new(vec![labels.len(), cols], probs.to_vec()).expect("sized");
    let hits = t.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

fn check_finite(term: &'static str, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(RcaError::NonFinite { term, step, value })
    }
}

fn check_batches(model: &RcaModel, batches: &[DomainBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(RcaError::Scheduling("no domain batches supplied".into()));
    }
    for b in batches {
        if b.domain >= model.num_domains() {
            return Err(RcaError::Usage(format!("batch domain {} out of range", b.domain)));
        }
        if b.labels.is_empty() || b.labeled_x.dims2().0 != b.labels.len() {
            return Err(RcaError::Scheduling(format!(
                "domain {}: empty or mislabeled labeled batch",
                b.domain
            )));
        }
        if b.unlabeled_x.as_ref().is_some_and(|u| u.dims2().0 == 0) {
            return Err(RcaError::Scheduling(format!("domain {}: empty unlabeled batch", b.domain)));
        }
    }
    Ok(())
}

/// Output of [`discriminator_phase`].
pub struct DiscriminatorOutcome {
    pub loss_d: f64,
    pub accuracy: f64,
}

/// Decreases `L_d` with respect to the discriminator's parameters only.
pub fn discriminator_phase(
    model: &mut RcaModel,
    batches: &[DomainBatch],
    pseudo: &[Option<Vec<usize>>],
    adam: &mut AdamStates,
    hp: &AdamParams,
    rng: &mut RunRng,
    step: usize,
) -> Result<DiscriminatorOutcome> {
    let (loss_d, accuracy, grads) = {
        let mut tape = Tape::new();
        let bound = model.bind_trainable(&mut tape, is_discriminator);
        let mut total: Option<Var> = None;
        let (mut hits, mut rows) = (0.0, 0usize);
        for (b, p) in batches.iter().zip(pseudo) {
            let (x, sentiments) = all_rows(b, p.as_ref())?;
            let labels = discriminator_labels(model.config.alignment, b.domain, &sentiments, model.num_domains())?;
            let xv = tape.constant(x);
            let dprobs = bound.discriminator_probs(&mut tape, xv, &mut Mode::Train(rng))?;
            let idx: Vec<usize> = labels.iter().map(|l| l.0).collect();
            hits += accuracy(tape.value(dprobs), tape.dims(dprobs).1, &idx) * idx.len() as f64;
            rows += idx.len();
            let l = losses::joint_adversarial_loss(&mut tape, dprobs, &labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("at least one batch");
        let value = tape.scalar(total);
        check_finite("L_d", step, value)?;
        let g = tape.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = bound.param_vars().iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect();
        (value, hits / rows as f64, grads)
    };
    adam.apply(model, &grads, hp, is_discriminator)?;
    Ok(DiscriminatorOutcome { loss_d, accuracy })
}

/// Output of [`min_player_phase`].
pub struct MinPlayerOutcome {
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss_e: f64,
    pub loss_uvt: f64,
    pub loss_lvt: f64,
    pub train_accuracy: Vec<f64>,
}

struct Accum(Option<Var>);

impl Accum {
    fn add(&mut self, tape: &mut Tape<'_>, v: Var) -> Result<()> {
        self.0 = Some(match self.0 {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
        Ok(())
    }

    fn value(&self, tape: &Tape<'_>) -> f64 {
        self.0.map_or(0.0, |v| tape.scalar(v))
    }
}

/// Updates the extractors and classifier on the min-player objective.
/// Terms whose weight is zero are not built at all.
#[allow(clippy::too_many_arguments)]
pub fn min_player_phase(
    model: &mut RcaModel,
    batches: &[DomainBatch],
    pseudo: &[Option<Vec<usize>>],
    cfg: &TrainConfig,
    adam: &mut AdamStates,
    rng: &mut RunRng,
    vat_rng: &mut RunRng,
    step: usize,
) -> Result<MinPlayerOutcome> {
    let w = cfg.loss_weights;
    let (outcome, grads) = {
        let snapshot: &RcaModel = model;
        let mut tape = Tape::new();
        let bound = snapshot.bind_trainable(&mut tape, is_min_player);
        let (mut lc, mut ld, mut le, mut luvt, mut llvt) = (Accum(None), Accum(None), Accum(None), Accum(None), Accum(None));
        let mut train_accuracy = Vec::with_capacity(batches.len());

        for (b, p) in batches.iter().zip(pseudo) {
            let xl = tape.leaf(&b.labeled_x, false);
            let sl = bound.shared_features(&mut tape, xl, &mut Mode::Train(rng))?;
            let pl = bound.private_features(&mut tape, xl, b.domain, &mut Mode::Train(rng))?;
            let probs = bound.classify(&mut tape, sl, pl, &mut Mode::Train(rng))?;
            train_accuracy.push(accuracy(tape.value(probs), 2, &b.labels));
            let l = losses::classification_loss(&mut tape, probs, &b.labels)?;
            lc.add(&mut tape, l)?;

            let unlabeled = b.unlabeled_x.as_ref().zip(p.as_ref());
            let xu = unlabeled.map(|(u, _)| tape.leaf(u, false));
            let su = match xu {
                Some(xu) if w.lambda_d > 0.0 || w.lambda_uvt > 0.0 => Some(bound.shared_features(&mut tape, xu, &mut Mode::Train(rng))?),
                _ => None,
            };

            if w.lambda_uvt > 0.0 {
                if let (Some(xu), Some(su)) = (xu, su) {
                    let pu = bound.private_features(&mut tape, xu, b.domain, &mut Mode::Train(rng))?;
                    let probs_u = bound.classify(&mut tape, su, pu, &mut Mode::Train(rng))?;
                    let e = losses::entropy_loss(&mut tape, probs_u)?;
                    le.add(&mut tape, e)?;
                }
            }

            if w.lambda_d > 0.0 {
                let s_all = match su {
                    Some(su) => tape.vstack(sl, su)?,
                    None => sl,
                };
                let mut sentiments = b.labels.clone();
                if su.is_some() {
                    sentiments.extend(p.as_ref().expect("pseudo-labels accompany unlabeled rows"));
                }
                let labels = discriminator_labels(snapshot.config.alignment, b.domain, &sentiments, snapshot.num_domains())?;
                let dprobs = bound.discriminate(&mut tape, s_all, &mut Mode::Train(rng))?;
                let l = losses::joint_adversarial_loss(&mut tape, dprobs, &labels)?;
                ld.add(&mut tape, l)?;
            }

            if w.lambda_uvt > 0.0 {
                if let Some(((u, _), xu)) = unlabeled.zip(xu) {
                    let r = vat::vat_perturbation(snapshot, u, b.domain, &cfg.vat, vat_rng)?;
                    let l = vat::vat_loss(&mut tape, &bound, xu, b.domain, &r)?;
                    luvt.add(&mut tape, l)?;
                }
            }

            if w.lambda_lvt > 0.0 {
                let r = vat::vat_perturbation(snapshot, &b.labeled_x, b.domain, &cfg.vat, vat_rng)?;
                let l = vat::vat_loss(&mut tape, &bound, xl, b.domain, &r)?;
                llvt.add(&mut tape, l)?;
            }
        }

        let outcome = MinPlayerOutcome {
            loss_c: lc.value(&tape),
            loss_d: ld.value(&tape),
            loss_e: le.value(&tape),
            loss_uvt: luvt.value(&tape),
            loss_lvt: llvt.value(&tape),
            train_accuracy,
        };
        for (term, v) in [
            ("L_c", outcome.loss_c),
            ("L_d", outcome.loss_d),
            ("L_e", outcome.loss_e),
            ("L_uvt", outcome.loss_uvt),
            ("L_lvt", outcome.loss_lvt),
        ] {
            check_finite(term, step, v)?;
        }

        let mut total = lc.0.expect("classification term always present");
        if let Some(d) = ld.0 {
            let t = tape.scale(d, -w.lambda_d);
            total = tape.add(total, t)?;
        }
        let mut unsup = Accum(None);
        for v in [le.0, luvt.0].into_iter().flatten() {
            unsup.add(&mut tape, v)?;
        }
        if let Some(u) = unsup.0 {
            let t = tape.scale(u, w.lambda_uvt);
            total = tape.add(total, t)?;
        }
        if let Some(l) = llvt.0 {
            let t = tape.scale(l, w.lambda_lvt);
            total = tape.add(total, t)?;
        }
        check_finite("total", step, tape.scalar(total))?;
        let g = tape.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = bound.param_vars().iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect();
        (outcome, grads)
    };
    adam.apply(model, &grads, &cfg.adam(), is_min_player)?;
    Ok(outcome)
}

/// One alternating step. Draws three sub-seeds from `rng` (discriminator
/// dropout, min-player dropout, VAT directions), so the stream advances by
/// the same amount whatever the configuration.
pub fn train_step(
    model: &mut RcaModel,
    batches: &[DomainBatch],
    cfg: &TrainConfig,
    adam: &mut AdamStates,
    rng: &mut RunRng,
    step: usize,
) -> Result<StepMetrics> {
    check_batches(model, batches)?;
    let seed_disc = rng.next_u64();
    let seed_min = rng.next_u64();
    let seed_vat = rng.next_u64();

    let pseudo = batches
        .iter()
        .map(|b| b.unlabeled_x.as_ref().map(|u| pseudo_label(model, u, b.domain)).transpose())
        .collect::<Result<Vec<_>>>()?;

    let disc = discriminator_phase(model, batches, &pseudo, adam, &cfg.adam(), &mut rng::stream(seed_disc, 0), step)?;
    let min = min_player_phase(
        model,
        batches,
        &pseudo,
        cfg,
        adam,
        &mut rng::stream(seed_min, 0),
        &mut rng::stream(seed_vat, 0),
        step,
    )?;
    Ok(StepMetrics {
        step,
        epoch: 0,
        loss_c: min.loss_c,
        loss_d: disc.loss_d,
        loss_e: min.loss_e,
        loss_uvt: min.loss_uvt,
        loss_lvt: min.loss_lvt,
        disc_accuracy: disc.accuracy,
        train_accuracy: min.train_accuracy,
        heldout_accuracy: None,
    })
}

/// Per-domain accuracy and the unweighted mean across domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<String>,
    pub per_domain: Vec<f64>,
    pub average: f64,
}

/// Accuracy of `predict` on the labeled samples of every test set.
pub fn evaluate_with<F>(test_sets: &[DomainDataset], transform: FeatureTransform, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(usize, &Tensor) -> Result<Vec<usize>>,
{
    if test_sets.is_empty() {
        return Err(RcaError::Usage("no test sets supplied".into()));
    }
    let mut per_domain = Vec::with_capacity(test_sets.len());
    for (d, ds) in test_sets.iter().enumerate() {
        if ds.labeled.is_empty() {
            return Err(RcaError::Usage(format!("test fold for domain {} is empty", ds.name)));
        }
        let mut hits = 0usize;
        let idx: Vec<usize> = (0..ds.labeled.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, y) = ds.labeled_batch(chunk, transform);
            let pred = predict(d, &x)?;
            hits += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
        }
        per_domain.push(hits as f64 / ds.labeled.len() as f64);
    }
    let average = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    Ok(EvalReport {
        domains: test_sets.iter().map(|d| d.name.clone()).collect(),
        per_domain,
        average,
    })
}

/// Eval-mode accuracy of `model`; test set `i` is routed to domain `i`.
pub fn evaluate(model: &RcaModel, test_sets: &[DomainDataset], transform: FeatureTransform) -> Result<EvalReport> {
    if test_sets.len() != model.num_domains() {
        return Err(RcaError::Usage(format!(
            "{} test sets for a {}-domain model",
            test_sets.len(),
            model.num_domains()
        )));
    }
    evaluate_with(test_sets, transform, |d, x| pseudo_label(model, x, d))
}

/// Produces each step's batches: labeled samples epoch-shuffled without
/// replacement (smaller sets recycled with a fresh shuffle), unlabeled
/// samples drawn uniformly with replacement.
pub struct BatchScheduler<'a> {
    datasets: &'a [DomainDataset],
    batch_size: usize,
    transform: FeatureTransform,
    rng: RunRng,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl<'a> BatchScheduler<'a> {
    pub fn new(datasets: &'a [DomainDataset], batch_size: usize, transform: FeatureTransform, seed: u64) -> Result<Self> {
        if let Some(d) = datasets.iter().find(|d| d.labeled.is_empty()) {
            return Err(RcaError::Config(format!("domain {} has no labeled samples", d.name)));
        }
        let mut rng = rng::stream(seed, rng::STREAM_SCHEDULE);
        let orders = datasets
            .iter()
            .map(|d| {
                let mut o: Vec<usize> = (0..d.labeled.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(BatchScheduler {
            datasets,
            batch_size,
            transform,
            rng,
            orders,
            cursors: vec![0; datasets.len()],
        })
    }

    /// Steps needed for one pass over the largest labeled set.
    pub fn steps_per_epoch(&self) -> usize {
        let largest = self.datasets.iter().map(|d| d.labeled.len()).max().unwrap_or(0);
        largest.div_ceil(self.batch_size)
    }

    pub fn next_batches(&mut self) -> Vec<DomainBatch> {
        let mut out = Vec::with_capacity(self.datasets.len());
        for (d, ds) in self.datasets.iter().enumerate() {
            let mut picked = Vec::with_capacity(self.batch_size);
            while picked.len() < self.batch_size {
                if self.cursors[d] == self.orders[d].len() {
                    self.orders[d].shuffle(&mut self.rng);
                    self.cursors[d] = 0;
                }
                picked.push(self.orders[d][self.cursors[d]]);
                self.cursors[d] += 1;
            }
            let (labeled_x, labels) = ds.labeled_batch(&picked, self.transform);
            let unlabeled_x = (!ds.unlabeled.is_empty()).then(|| {
                let idx: Vec<usize> = (0..self.batch_size).map(|_| self.rng.random_range(0..ds.unlabeled.len())).collect();
                ds.unlabeled_batch(&idx, self.transform)
            });
            out.push(DomainBatch {
                domain: d,
                labeled_x,
                labels,
                unlabeled_x,
            });
        }
        out
    }
}

pub struct FitResult {
    pub model: RcaModel,
    pub history: Vec<StepMetrics>,
}

/// Optional extras for [`fit_with`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Held-out sets (one per domain) evaluated at the end of every epoch.
    pub heldout: Option<&'a [DomainDataset]>,
    /// Called after every epoch with the 1-based epoch number.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &RcaModel) -> Result<()>>,
}

pub fn fit(datasets: &[DomainDataset], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(datasets, model_cfg, cfg, FitHooks::default())
}

/// Initialises a model from `cfg.seed` and trains it for `cfg.epochs`
/// epochs.
pub fn fit_with(datasets: &[DomainDataset], model_cfg: &ModelConfig, cfg: &TrainConfig, mut hooks: FitHooks<'_>) -> Result<FitResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if datasets.is_empty() {
        return Err(RcaError::Config("at least one domain is required".into()));
    }
    if datasets.len() != model_cfg.num_domains {
        return Err(RcaError::Config(format!(
            "model configured for {} domains, {} supplied",
            model_cfg.num_domains,
            datasets.len()
        )));
    }
    if let Some(d) = datasets.iter().find(|d| d.input_dim != model_cfg.input_dim) {
        return Err(RcaError::Config(format!(
            "domain {} has input_dim {}, model expects {}",
            d.name, d.input_dim, model_cfg.input_dim
        )));
    }
    let mut model = RcaModel::init(model_cfg.clone(), cfg.seed)?;
    let mut adam = AdamStates::new(&model);
    let mut scheduler = BatchScheduler::new(datasets, cfg.batch_size, cfg.feature_transform, cfg.seed)?;
    let mut step_rng = rng::stream(cfg.seed, rng::STREAM_STEP);
    let steps = scheduler.steps_per_epoch();
    let mut history = Vec::with_capacity(steps * cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps {
            let batches = scheduler.next_batches();
            let mut m = train_step(&mut model, &batches, cfg, &mut adam, &mut step_rng, step)?;
            m.epoch = epoch;
            history.push(m);
            step += 1;
        }
        if let Some(heldout) = hooks.heldout {
            let report = evaluate(&model, heldout, cfg.feature_transform)?;
            if let Some(last) = history.last_mut() {
                last.heldout_accuracy = Some(report.per_domain);
            }
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(epoch, &model)?;
        }
    }
    Ok(FitResult { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseVector;

    fn tiny_cfg(m: usize, d: usize) -> ModelConfig {
        ModelConfig {
            num_domains: m,
            input_dim: d,
            shared_dim: 3,
            private_dim: 2,
            extractor_hidden: vec![4],
            classifier_hidden: 4,
            discriminator_hidden: 3,
            dropout_rate: 0.4,
            alignment: Alignment::Joint,
        }
    }

    fn toy_domain(name: &str, n: usize, unlabeled: usize) -> DomainDataset {
        let labeled = (0..n)
            .map(|i| (SparseVector::from_dense(&[i as f64 % 3.0, (i % 2) as f64 * 2.0, 1.0]), i % 2))
            .collect();
        let unlabeled = (0..unlabeled).map(|i| SparseVector::from_dense(&[1.0, i as f64 % 2.0, 0.5])).collect();
        DomainDataset {
            name: name.into(),
            input_dim: 3,
            labeled,
            unlabeled,
        }
    }

    #[test]
    fn pseudo_label_tie_breaks_low() {
        let mut model = RcaModel::init(tiny_cfg(1, 3), 0).unwrap();
        let last = model.classifier.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(pseudo_label(&model, &x, 0).unwrap(), vec![0]);
    }

    #[test]
    fn empty_labeled_domain_is_config_error() {
        let ds = [toy_domain("a", 4, 0), toy_domain("b", 0, 3)];
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let err = fit(&ds, &tiny_cfg(2, 3), &cfg).err().unwrap();
        assert!(matches!(err, RcaError::Config(m) if m.contains('b')));
    }

    #[test]
    fn empty_batch_is_scheduling_error() {
        let mut model = RcaModel::init(tiny_cfg(1, 3), 0).unwrap();
        let mut adam = AdamStates::new(&model);
        let batch = DomainBatch {
            domain: 0,
            labeled_x: Tensor::zeros(vec![0, 3]),
            labels: vec![],
            unlabeled_x: None,
        };
        let err = train_step(&mut model, &[batch], &TrainConfig::default(), &mut adam, &mut rng::stream(0, 0), 0);
        assert!(matches!(err, Err(RcaError::Scheduling(_))));
        assert!(matches!(
            train_step(&mut model, &[], &TrainConfig::default(), &mut adam, &mut rng::stream(0, 0), 0),
            Err(RcaError::Scheduling(_))
        ));
    }

    #[test]
    fn non_finite_input_names_term() {
        let mut model = RcaModel::init(tiny_cfg(1, 3), 0).unwrap();
        let mut adam = AdamStates::new(&model);
        let batch = DomainBatch {
            domain: 0,
            labeled_x: Tensor::from_rows(&[[f64::NAN, 0.0, 0.0]]).unwrap(),
            labels: vec![0],
            unlabeled_x: None,
        };
        let cfg = TrainConfig {
            loss_weights: LossWeights {
                lambda_d: 0.0,
                lambda_uvt: 0.0,
                lambda_lvt: 0.0,
            },
            ..Default::default()
        };
        match train_step(&mut model, &[batch], &cfg, &mut adam, &mut rng::stream(0, 0), 7) {
            Err(RcaError::NonFinite { term, step, .. }) => {
                assert_eq!(step, 7);
                assert!(term.starts_with("L_"));
            }
            other => panic!("expected non-finite abort, got {:?}", other.map(|m| m.loss_c)),
        }
    }

    #[test]
    fn scheduler_cycles_and_recycles() {
        let ds = [toy_domain("a", 10, 5), toy_domain("b", 3, 0)];
        let mut s = BatchScheduler::new(&ds, 4, FeatureTransform::Raw, 1).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let b = s.next_batches();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].labels.len(), 4);
        assert_eq!(b[1].labels.len(), 4);
        assert!(b[0].unlabeled_x.is_some());
        assert!(b[1].unlabeled_x.is_none());
    }

    #[test]
    fn evaluate_perfect_and_constant() {
        let ds = [toy_domain("a", 10, 0), toy_domain("b", 6, 0)];
        let perfect = evaluate_with(&ds, FeatureTransform::Raw, |_, x| Ok((0..x.dims2().0).map(|i| i % 2).collect())).unwrap();
        assert_eq!(perfect.per_domain, vec![1.0, 1.0]);
        assert_eq!(perfect.average, 1.0);
        let constant = evaluate_with(&ds, FeatureTransform::Raw, |_, x| Ok(vec![0; x.dims2().0])).unwrap();
        assert_eq!(constant.per_domain, vec![0.5, 0.5]);
        assert_eq!(constant.average, (constant.per_domain[0] + constant.per_domain[1]) / 2.0);

        let empty = [toy_domain("e", 0, 0)];
        assert!(matches!(
            evaluate_with(&empty, FeatureTransform::Raw, |_, _| Ok(vec![])),
            Err(RcaError::Usage(_))
        ));
    }

    #[test]
    fn train_config_defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.loss_weights.lambda_d, 0.5);
        assert_eq!(c.loss_weights.lambda_uvt, 1.0);
        assert_eq!(c.loss_weights.lambda_lvt, 0.01);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.epochs, 50);
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }
}
