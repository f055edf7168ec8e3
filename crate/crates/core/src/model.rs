//! The shared-private network: a shared extractor, one private extractor
//! per domain, a sentiment classifier over the concatenated features, and a
//! discriminator over the shared feature alone.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{RcaError, Result};
use crate::rng::{self, RunRng};
use crate::tensor::Tensor;

/// Number of sentiment classes. Class 0 is positive, class 1 negative.
pub const NUM_CLASSES: usize = 2;

/// What the discriminator is asked to predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// `2M`-way joint (sentiment, domain) labels.
    #[default]
    Joint,
    /// `M`-way domain labels only (marginal alignment ablation).
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_domains: usize,
    pub input_dim: usize,
    pub shared_dim: usize,
    pub private_dim: usize,
    pub extractor_hidden: Vec<usize>,
    /// Width of the classifier's hidden layer; `0` means no hidden layer.
    pub classifier_hidden: usize,
    /// Width of the discriminator's hidden layer; `0` means no hidden layer.
    pub discriminator_hidden: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub alignment: Alignment,
}

impl ModelConfig {
    /// Amazon-review architecture for `num_domains` domains.
    pub fn amazon(num_domains: usize) -> Self {
        ModelConfig {
            num_domains,
            input_dim: 5000,
            shared_dim: 128,
            private_dim: 64,
            extractor_hidden: vec![1000, 500],
            classifier_hidden: 128 + 64,
            discriminator_hidden: 128,
            dropout_rate: 0.4,
            alignment: Alignment::Joint,
        }
    }

    pub fn classifier_input(&self) -> usize {
        self.shared_dim + self.private_dim
    }

    pub fn discriminator_output(&self) -> usize {
        match self.alignment {
            Alignment::Joint => 2 * self.num_domains,
            Alignment::Marginal => self.num_domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(RcaError::Config(msg.to_string()));
        if self.num_domains == 0 {
            return bad("num_domains must be positive");
        }
        if self.input_dim == 0 || self.shared_dim == 0 || self.private_dim == 0 {
            return bad("input_dim, shared_dim and private_dim must be positive");
        }
        if self.extractor_hidden.contains(&0) {
            return bad("extractor hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Shared,
    Private(usize),
    Classifier,
    Discriminator,
}

impl Component {
    pub fn label(self) -> String {
        match self {
            Component::Shared => "shared".into(),
            Component::Private(i) => format!("private{i}"),
            Component::Classifier => "classifier".into(),
            Component::Discriminator => "discriminator".into(),
        }
    }
}

/// Dense layer `y = x·W + b` with `W: [in×out]`, `b: [1×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RunRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized").with_grad(),
            bias: Tensor::zeros(vec![1, fan_out]).with_grad(),
        }
    }
}

/// Stack of dense layers. Every layer except the last is followed by ReLU
/// and dropout; `activate_output` additionally applies ReLU to the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_output: bool,
}

impl Mlp {
    fn init(widths: &[usize], activate_output: bool, rng: &mut RunRng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp { layers, activate_output }
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundMlp {
        let mut reg = |t: &'p Tensor| if trainable { tape.param(t) } else { tape.frozen(t) };
        BoundMlp {
            layers: self.layers.iter().map(|l| (reg(&l.weight), reg(&l.bias))).collect(),
            activate_output: self.activate_output,
        }
    }
}

/// Forward-pass mode. Dropout is only sampled in `Train`.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut RunRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles for one MLP's parameters.
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    activate_output: bool,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, dropout: f64, mode: &mut Mode<'_>) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h);
                h = match mode {
                    Mode::Train(rng) => tape.dropout(h, dropout, &mut **rng, true)?,
                    Mode::Eval => h,
                };
            } else if self.activate_output {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Tape handles for every parameter of an [`RcaModel`].
pub struct BoundModel {
    pub shared: BoundMlp,
    pub private: Vec<BoundMlp>,
    pub classifier: BoundMlp,
    pub discriminator: BoundMlp,
    dropout: f64,
    num_domains: usize,
}

impl BoundModel {
    /// Parameter handles in the order of [`RcaModel::named_params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mlps = std::iter::once(&self.shared)
            .chain(&self.private)
            .chain([&self.classifier, &self.discriminator]);
        for m in mlps {
            for &(w, b) in &m.layers {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn shared_features(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.shared.forward(tape, x, self.dropout, mode)
    }

    pub fn private_features(&self, tape: &mut Tape<'_>, x: Var, domain: usize, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_domain(domain)?;
        self.private[domain].forward(tape, x, self.dropout, mode)
    }

    /// Class probabilities from already computed shared and private features.
    pub fn classify(&self, tape: &mut Tape<'_>, shared: Var, private: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let joint = tape.concat(shared, private)?;
        let logits = self.classifier.forward(tape, joint, self.dropout, mode)?;
        Ok(tape.softmax(logits))
    }

    /// Discriminator probabilities from the shared feature.
    pub fn discriminate(&self, tape: &mut Tape<'_>, shared: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let logits = self.discriminator.forward(tape, shared, self.dropout, mode)?;
        Ok(tape.softmax(logits))
    }

    /// `softmax(C([F_s(x), F_d^domain(x)]))`.
    pub fn classifier_probs(&self, tape: &mut Tape<'_>, x: Var, domain: usize, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_domain(domain)?;
        let s = self.shared_features(tape, x, mode)?;
        let p = self.private_features(tape, x, domain, mode)?;
        self.classify(tape, s, p, mode)
    }

    /// `softmax(D(F_s(x)))`.
    pub fn discriminator_probs(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let s = self.shared_features(tape, x, mode)?;
        self.discriminate(tape, s, mode)
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.num_domains {
            return Err(RcaError::Usage(format!(
                "domain {domain} out of range for {} domains",
                self.num_domains
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcaModel {
    pub config: ModelConfig,
    pub shared: Mlp,
    pub private: Vec<Mlp>,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

impl RcaModel {
    /// Fan-scaled uniform weights, zero biases. Components are drawn in the
    /// order shared, private, classifier, discriminator from one stream, so
    /// models that differ only in discriminator width share everything else.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let extractor = |out: usize, rng: &mut RunRng| {
            let mut widths = vec![config.input_dim];
            widths.extend(&config.extractor_hidden);
            widths.push(out);
            Mlp::init(&widths, true, rng)
        };
        let shared = extractor(config.shared_dim, &mut rng);
        let private = (0..config.num_domains).map(|_| extractor(config.private_dim, &mut rng)).collect();
        let head = |input: usize, hidden: usize, out: usize, rng: &mut RunRng| {
            let widths: Vec<usize> = if hidden == 0 { vec![input, out] } else { vec![input, hidden, out] };
            Mlp::init(&widths, false, rng)
        };
        let classifier = head(config.classifier_input(), config.classifier_hidden, NUM_CLASSES, &mut rng);
        let discriminator = head(config.shared_dim, config.discriminator_hidden, config.discriminator_output(), &mut rng);
        Ok(RcaModel {
            config,
            shared,
            private,
            classifier,
            discriminator,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> BoundModel {
        self.bind_trainable(tape, |_| true)
    }

    /// Registers every parameter, tracking gradients only for components
    /// selected by `trainable`.
    pub fn bind_trainable<'p>(&'p self, tape: &mut Tape<'p>, trainable: impl Fn(Component) -> bool) -> BoundModel {
        BoundModel {
            shared: self.shared.bind(tape, trainable(Component::Shared)),
            private: self
                .private
                .iter()
                .enumerate()
                .map(|(i, m)| m.bind(tape, trainable(Component::Private(i))))
                .collect(),
            classifier: self.classifier.bind(tape, trainable(Component::Classifier)),
            discriminator: self.discriminator.bind(tape, trainable(Component::Discriminator)),
            dropout: self.config.dropout_rate,
            num_domains: self.config.num_domains,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2();
        if d != self.config.input_dim {
            return Err(RcaError::Dimension {
                op: "model input",
                left: vec![self.config.input_dim],
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Eval-mode class probabilities `[n×2]`.
    pub fn forward_classifier(&self, x: &Tensor, domain: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x, false);
        let p = bound.classifier_probs(&mut tape, xv, domain, &mut Mode::Eval)?;
        Ok(tape.to_tensor(p))
    }

    /// Eval-mode discriminator probabilities `[n×2M]` (or `[n×M]` for the
    /// marginal ablation).
    pub fn forward_discriminator(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x, false);
        let p = bound.discriminator_probs(&mut tape, xv, &mut Mode::Eval)?;
        Ok(tape.to_tensor(p))
    }

    fn components(&self) -> Vec<(Component, &Mlp)> {
        let mut out = vec![(Component::Shared, &self.shared)];
        out.extend(self.private.iter().enumerate().map(|(i, m)| (Component::Private(i), m)));
        out.push((Component::Classifier, &self.classifier));
        out.push((Component::Discriminator, &self.discriminator));
        out
    }

    /// Every parameter in canonical order, named `component/layer/kind`.
    pub fn named_params(&self) -> Vec<(String, Component, &Tensor)> {
        let mut out = Vec::new();
        for (c, mlp) in self.components() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{}/{i}/weight", c.label()), c, &l.weight));
                out.push((format!("{}/{i}/bias", c.label()), c, &l.bias));
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`RcaModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<(Component, &mut Tensor)> {
        let mut mlps: Vec<(Component, &mut Mlp)> = vec![(Component::Shared, &mut self.shared)];
        for (i, m) in self.private.iter_mut().enumerate() {
            mlps.push((Component::Private(i), m));
        }
        mlps.push((Component::Classifier, &mut self.classifier));
        mlps.push((Component::Discriminator, &mut self.discriminator));
        let mut out = Vec::new();
        for (c, mlp) in mlps {
            for l in &mut mlp.layers {
                out.push((c, &mut l.weight));
                out.push((c, &mut l.bias));
            }
        }
        out
    }

    /// Hex SHA-256 over the bit patterns of the selected components' parameters.
    pub fn param_hash(&self, include: impl Fn(Component) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, c, t) in self.named_params() {
            if !include(c) {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn component_hash(&self, c: Component) -> String {
        self.param_hash(|x| x == c)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| RcaError::Checkpoint(e.to_string()))?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        let params = self.named_params();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, _, t) in params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| RcaError::io(path, e))?;
        f.write_all(&buf).map_err(|e| RcaError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RcaError::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(RcaError::Checkpoint("bad magic".into()));
        }
        let cfg_len = r.u64()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| RcaError::Checkpoint(e.to_string()))?;
        let mut model = RcaModel::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u64()? as usize;
        if count != expected.len() {
            return Err(RcaError::Checkpoint(format!(
                "expected {} parameters, found {count}",
                expected.len()
            )));
        }
        for ((name, shape), (_, slot)) in expected.into_iter().zip(model.params_mut()) {
            let n = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(n)?).map_err(|e| RcaError::Checkpoint(e.to_string()))?;
            if got != name {
                return Err(RcaError::Checkpoint(format!("expected parameter {name}, found {got}")));
            }
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(RcaError::Checkpoint(format!("{name}: shape {dims:?} != {shape:?}")));
            }
            for v in slot.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(RcaError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"RCACKPT1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RcaError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn small(m: usize) -> ModelConfig {
        ModelConfig {
            num_domains: m,
            input_dim: 6,
            shared_dim: 4,
            private_dim: 3,
            extractor_hidden: vec![5],
            classifier_hidden: 7,
            discriminator_hidden: 4,
            dropout_rate: 0.4,
            alignment: Alignment::Joint,
        }
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, 99);
        let data = (0..n * d).map(|_| rng.random_range(0.0..3.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = RcaModel::init(small(3), 11).unwrap();
        let b = RcaModel::init(small(3), 11).unwrap();
        assert_eq!(a, b);
        let c = RcaModel::init(small(3), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn amazon_defaults_have_expected_widths() {
        let cfg = ModelConfig::amazon(4);
        assert_eq!(cfg.discriminator_output(), 8);
        assert_eq!(cfg.classifier_input(), 192);
        assert_eq!(cfg.classifier_hidden, 192);
        assert_eq!(cfg.discriminator_hidden, 128);
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_limit() {
        let m = RcaModel::init(small(2), 3).unwrap();
        for (name, _, t) in m.named_params() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let (i, o) = t.dims2();
                let limit = (6.0 / (i + o) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= limit), "{name}");
            }
        }
    }

    #[test]
    fn discriminator_width_is_two_m() {
        let m = RcaModel::init(small(4), 1).unwrap();
        let p = m.forward_discriminator(&random_input(3, 6, 0)).unwrap();
        assert_eq!(p.shape(), &[3, 8]);
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_rows_are_distributions() {
        let m = RcaModel::init(small(2), 5).unwrap();
        let x = random_input(5, 6, 1);
        let p = m.forward_classifier(&x, 1).unwrap();
        assert_eq!(p.shape(), &[5, 2]);
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, m.forward_classifier(&x, 1).unwrap());
    }

    #[test]
    fn domain_tag_selects_private_path() {
        let m = RcaModel::init(small(2), 8).unwrap();
        let x = random_input(1, 6, 2);
        let a = m.forward_classifier(&x, 0).unwrap();
        let b = m.forward_classifier(&x, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn domain_out_of_range_is_usage_error() {
        let m = RcaModel::init(small(2), 8).unwrap();
        let err = m.forward_classifier(&random_input(1, 6, 2), 2).unwrap_err();
        assert!(matches!(err, RcaError::Usage(_)));
    }

    #[test]
    fn discriminator_ignores_private_extractors() {
        let mut m = RcaModel::init(small(2), 8).unwrap();
        let x = random_input(4, 6, 3);
        let before = m.forward_discriminator(&x).unwrap();
        for l in &mut m.private[0].layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 7.0);
        }
        assert_eq!(before, m.forward_discriminator(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = RcaModel::init(small(3), 21).unwrap();
        m.save_checkpoint(&path).unwrap();
        let back = RcaModel::load_checkpoint(&path).unwrap();
        assert_eq!(m, back);
        let x = random_input(2, 6, 4);
        assert_eq!(m.forward_classifier(&x, 2).unwrap(), back.forward_classifier(&x, 2).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(RcaModel::load_checkpoint(&path), Err(RcaError::Checkpoint(_))));
    }

    #[test]
    fn marginal_shares_everything_but_discriminator() {
        let joint = RcaModel::init(small(3), 4).unwrap();
        let marginal = RcaModel::init(
            ModelConfig {
                alignment: Alignment::Marginal,
                ..small(3)
            },
            4,
        )
        .unwrap();
        let not_disc = |c: Component| c != Component::Discriminator;
        assert_eq!(joint.param_hash(not_disc), marginal.param_hash(not_disc));
        assert_eq!(marginal.config.discriminator_output(), 3);
    }
}
