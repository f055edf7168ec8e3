//! Per-domain datasets, the sparse TSV interchange format, and stratified
//! k-fold splitting.
//!
//! A domain directory holds `labeled.tsv` and `unlabeled.tsv`:
//!
//! ```text
//! labeled.tsv    <label>\t<idx>:<count> <idx>:<count> ...
//! unlabeled.tsv  <idx>:<count> <idx>:<count> ...
//! ```
//!
//! Labels are `0` (positive) or `1` (negative). Indices are strictly
//! increasing within a line and below the input dimension. Files are UTF-8
//! with LF line endings; an empty feature list is allowed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LABELED_FILE: &str = "labeled.tsv";
pub const UNLABELED_FILE: &str = "unlabeled.tsv";
/// Optional held-out labeled file, same grammar as `labeled.tsv`.
pub const TEST_FILE: &str = "test.tsv";

/// Sparse feature vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut out = SparseVector::default();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                out.indices.push(i as u32);
                out.values.push(v);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn canonical_key(&self) -> (Vec<u32>, Vec<u64>) {
        (self.indices.clone(), self.values.iter().map(|v| v.to_bits()).collect())
    }
}

/// What a feature value token may hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    /// Nonnegative integer counts (bag-of-features data).
    #[default]
    Counts,
    /// Nonnegative finite decimals (synthetic data).
    Real,
}

/// Applied when densifying features for the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTransform {
    #[default]
    Raw,
    Log1p,
}

impl FeatureTransform {
    fn apply(self, v: f64) -> f64 {
        match self {
            FeatureTransform::Raw => v,
            FeatureTransform::Log1p => v.ln_1p(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub input_dim: usize,
    pub labeled: Vec<(SparseVector, usize)>,
    pub unlabeled: Vec<SparseVector>,
}

impl DomainDataset {
    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    /// Copy keeping only the labeled samples at `indices` (unlabeled data
    /// is kept whole).
    pub fn with_labeled_subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            name: self.name.clone(),
            input_dim: self.input_dim,
            labeled: indices.iter().map(|&i| self.labeled[i].clone()).collect(),
            unlabeled: self.unlabeled.clone(),
        }
    }

    /// Labeled samples at `indices` only, no unlabeled data.
    pub fn labeled_only(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            name: self.name.clone(),
            input_dim: self.input_dim,
            labeled: indices.iter().map(|&i| self.labeled[i].clone()).collect(),
            unlabeled: Vec::new(),
        }
    }

    /// Dense `[n×input_dim]` matrix of the chosen labeled samples, plus labels.
    pub fn labeled_batch(&self, indices: &[usize], transform: FeatureTransform) -> (Tensor, Vec<usize>) {
        let rows: Vec<&SparseVector> = indices.iter().map(|&i| &self.labeled[i].0).collect();
        let labels = indices.iter().map(|&i| self.labeled[i].1).collect();
        (densify(&rows, self.input_dim, transform), labels)
    }

    pub fn unlabeled_batch(&self, indices: &[usize], transform: FeatureTransform) -> Tensor {
        let rows: Vec<&SparseVector> = indices.iter().map(|&i| &self.unlabeled[i]).collect();
        densify(&rows, self.input_dim, transform)
    }

    /// Checks the documented invariants.
    pub fn validate(&self) -> Result<()> {
        let check = |v: &SparseVector| -> Result<()> {
            if v.indices.len() != v.values.len() {
                return Err(RcaError::Data(format!("{}: index/value length mismatch", self.name)));
            }
            for w in v.indices.windows(2) {
                if w[0] >= w[1] {
                    return Err(RcaError::Data(format!("{}: indices not strictly increasing", self.name)));
                }
            }
            if let Some(&i) = v.indices.last() {
                if i as usize >= self.input_dim {
                    return Err(RcaError::Data(format!("{}: index {i} >= {}", self.name, self.input_dim)));
                }
            }
            if v.values.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(RcaError::Data(format!("{}: negative or non-finite value", self.name)));
            }
            Ok(())
        };
        for (v, y) in &self.labeled {
            check(v)?;
            if *y > 1 {
                return Err(RcaError::Data(format!("{}: label {y} outside {{0,1}}", self.name)));
            }
        }
        self.unlabeled.iter().try_for_each(check)
    }
}

pub fn densify(rows: &[&SparseVector], input_dim: usize, transform: FeatureTransform) -> Tensor {
    let mut data = vec![0.0; rows.len() * input_dim];
    for (r, v) in rows.iter().enumerate() {
        for (&i, &x) in v.indices.iter().zip(&v.values) {
            data[r * input_dim + i as usize] = transform.apply(x);
        }
    }
    Tensor::new(vec![rows.len(), input_dim], data).expect("sized")
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> RcaError {
    RcaError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_value(tok: &str, kind: ValueKind) -> std::result::Result<f64, String> {
    match kind {
        ValueKind::Counts => {
            if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("count {tok:?} is not a nonnegative integer"));
            }
            tok.parse::<u64>()
                .map(|c| c as f64)
                .map_err(|_| format!("count {tok:?} is out of range"))
        }
        ValueKind::Real => match tok.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            _ => Err(format!("value {tok:?} is not a nonnegative finite number")),
        },
    }
}

fn parse_features(text: &str, input_dim: usize, kind: ValueKind) -> std::result::Result<SparseVector, String> {
    let mut out = SparseVector::default();
    if text.is_empty() {
        return Ok(out);
    }
    for tok in text.split(' ') {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| format!("feature token {tok:?} is not <index>:<count>"))?;
        if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("feature index {idx:?} is not a nonnegative integer"));
        }
        let idx: u32 = idx.parse().map_err(|_| format!("feature index {idx:?} is out of range"))?;
        if idx as usize >= input_dim {
            return Err(format!("feature index {idx} >= input dimension {input_dim}"));
        }
        if let Some(&prev) = out.indices.last() {
            if idx <= prev {
                return Err(format!("feature index {idx} does not increase past {prev}"));
            }
        }
        out.indices.push(idx);
        out.values.push(parse_value(val, kind)?);
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| RcaError::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        parse_err(path, line, "invalid UTF-8")
    })
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let empty = text.is_empty();
    body.split('\n').enumerate().filter(move |_| !empty).map(|(i, l)| (i + 1, l))
}

fn check_line(path: &Path, n: usize, line: &str) -> Result<()> {
    if line.contains('\r') {
        return Err(parse_err(path, n, "carriage return found; files must use LF line endings"));
    }
    Ok(())
}

/// Parses a labeled file (`labeled.tsv` or `test.tsv`).
pub fn parse_labeled_file(path: &Path, input_dim: usize, kind: ValueKind) -> Result<Vec<(SparseVector, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in lines(&text) {
        check_line(path, n, line)?;
        let (label, rest) = line.split_once('\t').unwrap_or((line, ""));
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, n, format!("label {other:?} is not 0 or 1"))),
        };
        let features = parse_features(rest, input_dim, kind).map_err(|m| parse_err(path, n, m))?;
        out.push((features, label));
    }
    Ok(out)
}

pub fn parse_unlabeled_file(path: &Path, input_dim: usize, kind: ValueKind) -> Result<Vec<SparseVector>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in lines(&text) {
        check_line(path, n, line)?;
        if line.contains('\t') {
            return Err(parse_err(path, n, "unlabeled lines carry no label column"));
        }
        out.push(parse_features(line, input_dim, kind).map_err(|m| parse_err(path, n, m))?);
    }
    Ok(out)
}

fn domain_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Loads `labeled.tsv` and `unlabeled.tsv` from a domain directory,
/// accepting integer counts only.
pub fn load_domain(dir: &Path, input_dim: usize) -> Result<DomainDataset> {
    load_domain_with(dir, input_dim, ValueKind::Counts)
}

pub fn load_domain_with(dir: &Path, input_dim: usize, kind: ValueKind) -> Result<DomainDataset> {
    let name = domain_name(dir);
    let labeled_path = dir.join(LABELED_FILE);
    if !labeled_path.is_file() {
        return Err(RcaError::Data(format!("domain {name}: missing {}", labeled_path.display())));
    }
    let unlabeled_path = dir.join(UNLABELED_FILE);
    if !unlabeled_path.is_file() {
        return Err(RcaError::Data(format!("domain {name}: missing {}", unlabeled_path.display())));
    }
    Ok(DomainDataset {
        name,
        input_dim,
        labeled: parse_labeled_file(&labeled_path, input_dim, kind)?,
        unlabeled: parse_unlabeled_file(&unlabeled_path, input_dim, kind)?,
    })
}

/// Held-out labeled samples from `test.tsv`, if the directory has one.
pub fn load_test_split(dir: &Path, input_dim: usize, kind: ValueKind) -> Result<Option<DomainDataset>> {
    let path = dir.join(TEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(DomainDataset {
        name: domain_name(dir),
        input_dim,
        labeled: parse_labeled_file(&path, input_dim, kind)?,
        unlabeled: Vec::new(),
    }))
}

/// Sorted subdirectories of `root`, one per domain.
pub fn domain_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| RcaError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(RcaError::Data(format!("no domain directories under {}", root.display())));
    }
    Ok(dirs)
}

pub fn format_features(v: &SparseVector) -> String {
    let mut s = String::new();
    for (k, (i, x)) in v.indices.iter().zip(&v.values).enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{i}:{x}");
    }
    s
}

pub fn format_labeled(rows: &[(SparseVector, usize)]) -> String {
    let mut s = String::new();
    for (v, y) in rows {
        let _ = writeln!(s, "{y}\t{}", format_features(v));
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RcaError::io(path, e))
}

/// Writes a domain directory. Values are printed with Rust's shortest
/// round-trip formatting, so reloading reproduces them exactly.
pub fn write_domain(dir: &Path, ds: &DomainDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RcaError::io(dir, e))?;
    write_file(&dir.join(LABELED_FILE), &format_labeled(&ds.labeled))?;
    let mut unl = String::new();
    for v in &ds.unlabeled {
        unl.push_str(&format_features(v));
        unl.push('\n');
    }
    write_file(&dir.join(UNLABELED_FILE), &unl)
}

pub fn write_test_split(dir: &Path, rows: &[(SparseVector, usize)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RcaError::io(dir, e))?;
    write_file(&dir.join(TEST_FILE), &format_labeled(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
}

impl Default for FoldSpec {
    fn default() -> Self {
        FoldSpec { k: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split of the labeled samples.
///
/// Samples are first put in a canonical content order (label, then
/// features), shuffled per class with the fold seed, and dealt round-robin
/// across folds with one running counter, so fold sizes differ by at most
/// one and each class is spread evenly. The assignment depends on sample
/// content only, not on file order.
pub fn kfold_split(ds: &DomainDataset, spec: &FoldSpec) -> Result<Vec<Fold>> {
    let n = ds.labeled.len();
    if spec.k < 2 {
        return Err(RcaError::Usage(format!("k-fold needs k >= 2, got {}", spec.k)));
    }
    if n < spec.k {
        return Err(RcaError::Usage(format!(
            "domain {} has {n} labeled samples, fewer than k = {}",
            ds.name, spec.k
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_cached_key(|&i| (ds.labeled[i].1, ds.labeled[i].0.canonical_key()));

    let mut rng = rng::stream(spec.seed, rng::STREAM_FOLDS);
    let mut fold_of = vec![0usize; n];
    let mut counter = 0usize;
    for class in 0..2 {
        let mut members: Vec<usize> = order.iter().copied().filter(|&i| ds.labeled[i].1 == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = counter % spec.k;
            counter += 1;
        }
    }
    Ok((0..spec.k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            Fold { train, test }
        })
        .collect())
}
