use rca_core::autodiff::Tape;
use rca_core::data::{DomainDataset, FeatureTransform, SparseVector};
use rca_core::losses::{self, LossWeights};
use rca_core::model::{Alignment, Component, Mode, ModelConfig, RcaModel};
use rca_core::optim::{adam_update, AdamState};
use rca_core::rng;
use rca_core::tensor::Tensor;
use rca_core::train::{
    discriminator_phase, fit, min_player_phase, pseudo_label, AdamStates, BatchScheduler, DomainBatch, TrainConfig,
};
use rand::{Rng, RngCore};

fn cfg(m: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        num_domains: m,
        input_dim: 6,
        shared_dim: 4,
        private_dim: 3,
        extractor_hidden: vec![5],
        classifier_hidden: 4,
        discriminator_hidden: 4,
        dropout_rate: dropout,
        alignment: Alignment::Joint,
    }
}

fn random_batches(m: usize, seed: u64) -> Vec<DomainBatch> {
    let mut r = rng::stream(seed, 99);
    (0..m)
        .map(|domain| {
            let mut mat = |n: usize| {
                let data = (0..n * 6).map(|_| r.random_range(0.0..2.0)).collect();
                Tensor::new(vec![n, 6], data).unwrap()
            };
            let labeled_x = mat(6);
            let unlabeled_x = Some(mat(5));
            DomainBatch {
                domain,
                labeled_x,
                labels: vec![0, 1, 1, 0, 1, 0],
                unlabeled_x,
            }
        })
        .collect()
}

fn pseudo(model: &RcaModel, batches: &[DomainBatch]) -> Vec<Option<Vec<usize>>> {
    batches
        .iter()
        .map(|b| b.unlabeled_x.as_ref().map(|u| pseudo_label(model, u, b.domain).unwrap()))
        .collect()
}

fn hashes(model: &RcaModel) -> Vec<(Component, String)> {
    let mut comps = vec![Component::Shared, Component::Classifier, Component::Discriminator];
    comps.extend((0..model.num_domains()).map(Component::Private));
    comps.into_iter().map(|c| (c, model.component_hash(c))).collect()
}

#[test]
fn discriminator_phase_touches_only_discriminator() {
    let mut model = RcaModel::init(cfg(3, 0.3), 1).unwrap();
    let batches = random_batches(3, 1);
    let p = pseudo(&model, &batches);
    let before = hashes(&model);
    let mut adam = AdamStates::new(&model);
    discriminator_phase(&mut model, &batches, &p, &mut adam, &TrainConfig::default().adam(), &mut rng::stream(1, 0), 0).unwrap();
    for ((c, a), (_, b)) in before.iter().zip(hashes(&model)) {
        assert_eq!(*a == b, *c != Component::Discriminator, "{c:?}");
    }
}

#[test]
fn min_player_phase_leaves_discriminator_alone() {
    let mut model = RcaModel::init(cfg(3, 0.3), 2).unwrap();
    let batches = random_batches(3, 2);
    let p = pseudo(&model, &batches);
    let before = hashes(&model);
    let mut adam = AdamStates::new(&model);
    let tc = TrainConfig::default();
    min_player_phase(&mut model, &batches, &p, &tc, &mut adam, &mut rng::stream(2, 0), &mut rng::stream(2, 1), 0).unwrap();
    for ((c, a), (_, b)) in before.iter().zip(hashes(&model)) {
        assert_eq!(*a == b, *c == Component::Discriminator, "{c:?}");
    }
}

#[test]
fn zero_weight_min_phase_keeps_discriminator_bits() {
    let mut model = RcaModel::init(cfg(2, 0.3), 3).unwrap();
    let batches = random_batches(2, 3);
    let p = pseudo(&model, &batches);
    let disc = model.component_hash(Component::Discriminator);
    let tc = TrainConfig {
        loss_weights: LossWeights {
            lambda_d: 0.0,
            lambda_uvt: 0.0,
            lambda_lvt: 0.0,
        },
        ..Default::default()
    };
    let mut adam = AdamStates::new(&model);
    for step in 0..5 {
        min_player_phase(&mut model, &batches, &p, &tc, &mut adam, &mut rng::stream(3, step), &mut rng::stream(4, step), step as usize).unwrap();
    }
    assert_eq!(disc, model.component_hash(Component::Discriminator));
}

fn grads_by_component(model: &RcaModel, loss: impl for<'p> Fn(&mut Tape<'p>, &rca_core::model::BoundModel) -> rca_core::Result<rca_core::Var>) -> Vec<(Component, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = loss(&mut tape, &bound).unwrap();
    let g = tape.backward(l).unwrap();
    bound
        .param_vars()
        .iter()
        .zip(model.named_params())
        .map(|(&v, (_, c, _))| (c, g.get(v).map(<[f64]>::to_vec)))
        .collect()
}

fn all_zero(g: &Option<Vec<f64>>) -> bool {
    g.as_ref().is_none_or(|v| v.iter().all(|x| *x == 0.0))
}

#[test]
fn adversarial_loss_never_reaches_private_extractors() {
    let model = RcaModel::init(cfg(3, 0.0), 4).unwrap();
    let batches = random_batches(3, 4);
    let grads = grads_by_component(&model, |t, b| {
        let x = t.leaf(&batches[1].labeled_x, false);
        let d = b.discriminator_probs(t, x, &mut Mode::Eval)?;
        let labels = rca_core::train::discriminator_labels(Alignment::Joint, 1, &batches[1].labels, 3)?;
        losses::joint_adversarial_loss(t, d, &labels)
    });
    for (c, g) in &grads {
        match c {
            Component::Private(_) | Component::Classifier => assert!(all_zero(g), "{c:?}"),
            _ => assert!(!all_zero(g), "{c:?}"),
        }
    }
}

#[test]
fn classification_loss_stays_in_its_domain() {
    let model = RcaModel::init(cfg(3, 0.0), 5).unwrap();
    let batches = random_batches(3, 5);
    let grads = grads_by_component(&model, |t, b| {
        let x = t.leaf(&batches[0].labeled_x, false);
        let p = b.classifier_probs(t, x, 0, &mut Mode::Eval)?;
        losses::classification_loss(t, p, &batches[0].labels)
    });
    for (c, g) in &grads {
        match c {
            Component::Private(j) if *j != 0 => assert!(all_zero(g), "{c:?}"),
            Component::Discriminator => assert!(all_zero(g)),
            _ => assert!(!all_zero(g), "{c:?}"),
        }
    }
}

#[test]
fn discriminator_descent_does_not_raise_its_loss() {
    let mut model = RcaModel::init(cfg(2, 0.0), 6).unwrap();
    let batches = random_batches(2, 6);
    let p = pseudo(&model, &batches);
    let mut adam = AdamStates::new(&model);
    let hp = TrainConfig {
        learning_rate: 1e-4,
        ..Default::default()
    }
    .adam();
    let mut last = f64::INFINITY;
    for step in 0..30 {
        let out = discriminator_phase(&mut model, &batches, &p, &mut adam, &hp, &mut rng::stream(6, step), step as usize).unwrap();
        assert!(out.loss_d <= last, "step {step}: {} > {last}", out.loss_d);
        last = out.loss_d;
    }
}

fn separable(n: usize, seed: u64) -> DomainDataset {
    // positives above the line x + y = 3 on [0, 3]², margin 0.3
    let mut r = rng::stream(seed, 11);
    let mut labeled = Vec::new();
    while labeled.len() < n {
        let (x, y): (f64, f64) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let s = x + y - 3.0;
        if s.abs() < 0.3 {
            continue;
        }
        labeled.push((SparseVector::from_dense(&[x, y]), if s > 0.0 { 0 } else { 1 }));
    }
    DomainDataset {
        name: "toy".into(),
        input_dim: 2,
        labeled,
        unlabeled: Vec::new(),
    }
}

fn toy_model_cfg() -> ModelConfig {
    ModelConfig {
        num_domains: 1,
        input_dim: 2,
        shared_dim: 8,
        private_dim: 4,
        extractor_hidden: vec![16],
        classifier_hidden: 8,
        discriminator_hidden: 8,
        dropout_rate: 0.1,
        alignment: Alignment::Joint,
    }
}

fn supervised_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        loss_weights: LossWeights {
            lambda_d: 0.0,
            lambda_uvt: 0.0,
            lambda_lvt: 0.0,
        },
        learning_rate: 1e-2,
        batch_size: 16,
        epochs: 50,
        seed,
        ..Default::default()
    }
}

#[test]
fn separable_toy_set_is_learned() {
    let data = [separable(200, 7)];
    let tc = supervised_cfg(7);
    let result = fit(&data, &toy_model_cfg(), &tc).unwrap();
    let report = rca_core::evaluate(&result.model, &data, FeatureTransform::Raw).unwrap();
    assert!(report.average > 0.95, "train accuracy {}", report.average);
}

#[test]
fn fit_is_deterministic() {
    let data = [separable(60, 8)];
    let tc = TrainConfig {
        epochs: 3,
        ..supervised_cfg(8)
    };
    let a = fit(&data, &toy_model_cfg(), &tc).unwrap();
    let b = fit(&data, &toy_model_cfg(), &tc).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

/// Plain supervised training built from the same components: one loss, one
/// optimizer, the same per-step seed draws.
fn supervised_baseline(data: &[DomainDataset], mc: &ModelConfig, tc: &TrainConfig) -> RcaModel {
    let mut model = RcaModel::init(mc.clone(), tc.seed).unwrap();
    let mut states: Vec<AdamState> = model.named_params().iter().map(|(_, _, t)| AdamState::new(t.len())).collect();
    let mut sched = BatchScheduler::new(data, tc.batch_size, tc.feature_transform, tc.seed).unwrap();
    let mut step_rng = rng::stream(tc.seed, rng::STREAM_STEP);
    let hp = tc.adam();
    for _ in 0..tc.epochs * sched.steps_per_epoch() {
        let batch = sched.next_batches().remove(0);
        let _disc = step_rng.next_u64();
        let mut drop = rng::stream(step_rng.next_u64(), 0);
        let _vat = step_rng.next_u64();
        let grads: Vec<Option<Vec<f64>>> = {
            let mut tape = Tape::new();
            let bound = model.bind_trainable(&mut tape, |c| c != Component::Discriminator);
            let x = tape.leaf(&batch.labeled_x, false);
            let s = bound.shared_features(&mut tape, x, &mut Mode::Train(&mut drop)).unwrap();
            let p = bound.private_features(&mut tape, x, 0, &mut Mode::Train(&mut drop)).unwrap();
            let probs = bound.classify(&mut tape, s, p, &mut Mode::Train(&mut drop)).unwrap();
            let loss = losses::classification_loss(&mut tape, probs, &batch.labels).unwrap();
            let g = tape.backward(loss).unwrap();
            bound.param_vars().iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect()
        };
        for ((i, (c, param)), g) in model.params_mut().into_iter().enumerate().zip(&grads) {
            if c == Component::Discriminator {
                continue;
            }
            let g = g.clone().unwrap_or_else(|| vec![0.0; param.len()]);
            adam_update(param, &g, &mut states[i], &hp).unwrap();
        }
    }
    model
}

#[test]
fn zero_regularizers_match_plain_supervised_training_bitwise() {
    let data = [separable(50, 9)];
    let tc = TrainConfig {
        epochs: 4,
        ..supervised_cfg(9)
    };
    let mc = toy_model_cfg();
    let rca = fit(&data, &mc, &tc).unwrap().model;
    let base = supervised_baseline(&data, &mc, &tc);
    let not_disc = |c: Component| c != Component::Discriminator;
    assert_eq!(rca.param_hash(not_disc), base.param_hash(not_disc));
}
