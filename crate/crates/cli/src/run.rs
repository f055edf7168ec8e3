//! `train` and `ablate`: fold construction, parallel fits, and the single
//! writer that lays out a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rca_core::data::{self, kfold_split, DomainDataset, FoldSpec, ValueKind};
use rca_core::model::{Alignment, Component, ModelConfig, RcaModel};
use rca_core::train::{evaluate, fit_with, EvalReport, FitHooks, StepMetrics, TrainConfig};
use rca_core::{RcaError, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{sha256_hex, write_file, CliResult, ScenarioManifest, SCENARIO_FILE};

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    /// A TOML config, or a `manifest.json` from an earlier run.
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    /// Train the marginal (domain-only) discriminator instead of the joint one.
    pub ablation: bool,
}

/// Everything needed to rerun a training run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub value_kind: ValueKind,
    pub evaluation: String,
    /// `domain/file` → sha256 of the file's bytes.
    pub checksums: BTreeMap<String, String>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes_accuracy: Option<f64>,
}

/// Per-domain accuracy over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub evaluation: String,
    pub domains: Vec<String>,
    pub per_fold: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub average_mean: f64,
    pub average_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes_accuracy: Option<f64>,
}

struct Resolved {
    config: RunConfig,
    data_dir: PathBuf,
    expected_checksums: Option<BTreeMap<String, String>>,
}

fn resolve(args: &TrainArgs) -> Result<Resolved> {
    let (mut config, manifest) = match &args.config {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = std::fs::read_to_string(p).map_err(|e| RcaError::io(p, e))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| RcaError::Config(format!("{}: {e}", p.display())))?;
            (m.config.clone(), Some(m))
        }
        Some(p) => (RunConfig::load(p)?, None),
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(k) = args.folds {
        config.run.folds = k;
    }
    if args.ablation {
        config.model.alignment = Alignment::Marginal;
    }
    config.validate()?;
    let data_dir = match (&args.data, &manifest) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => m.data_dir.clone(),
        (None, None) => return Err(RcaError::Usage("--data is required".into())),
    };
    Ok(Resolved {
        config,
        data_dir,
        expected_checksums: manifest.map(|m| m.checksums),
    })
}

struct Loaded {
    train: Vec<DomainDataset>,
    test: Option<Vec<DomainDataset>>,
    value_kind: ValueKind,
    checksums: BTreeMap<String, String>,
    bayes_accuracy: Option<f64>,
}

fn load(cfg: &RunConfig, data_dir: &Path) -> Result<Loaded> {
    let kind = cfg.value_kind(data_dir);
    let mut train = Vec::new();
    let mut tests = Vec::new();
    let mut checksums = BTreeMap::new();
    for dir in data::domain_dirs(data_dir)? {
        let ds = data::load_domain_with(&dir, cfg.model.input_dim, kind)?;
        for file in [data::LABELED_FILE, data::UNLABELED_FILE, data::TEST_FILE] {
            let path = dir.join(file);
            if path.is_file() {
                let bytes = std::fs::read(&path).map_err(|e| RcaError::io(&path, e))?;
                checksums.insert(format!("{}/{file}", ds.name), sha256_hex(&bytes));
            }
        }
        tests.push(data::load_test_split(&dir, cfg.model.input_dim, kind)?);
        train.push(ds);
    }
    let test = tests.iter().all(Option::is_some).then(|| tests.into_iter().flatten().collect());
    let scenario = data_dir.join(SCENARIO_FILE);
    let bayes_accuracy = if scenario.is_file() {
        let text = std::fs::read_to_string(&scenario).map_err(|e| RcaError::io(&scenario, e))?;
        let m: ScenarioManifest =
            serde_json::from_str(&text).map_err(|e| RcaError::Data(format!("{}: {e}", scenario.display())))?;
        Some(m.bayes_accuracy)
    } else {
        None
    };
    Ok(Loaded {
        train,
        test,
        value_kind: kind,
        checksums,
        bayes_accuracy,
    })
}

struct Job {
    train: Vec<DomainDataset>,
    test: Vec<DomainDataset>,
}

fn jobs(loaded: &Loaded, k: usize, seed: u64) -> Result<(String, Vec<Job>)> {
    if let Some(test) = &loaded.test {
        return Ok((
            "holdout".into(),
            vec![Job {
                train: loaded.train.clone(),
                test: test.clone(),
            }],
        ));
    }
    let spec = FoldSpec { k, seed };
    let splits = loaded.train.iter().map(|d| kfold_split(d, &spec)).collect::<Result<Vec<_>>>()?;
    let jobs = (0..k)
        .map(|f| Job {
            train: loaded.train.iter().zip(&splits).map(|(d, s)| d.with_labeled_subset(&s[f].train)).collect(),
            test: loaded.train.iter().zip(&splits).map(|(d, s)| d.labeled_only(&s[f].test)).collect(),
        })
        .collect();
    Ok((format!("{k}-fold"), jobs))
}

struct FoldOutput {
    history: Vec<StepMetrics>,
    model: RcaModel,
    snapshots: Vec<(usize, RcaModel)>,
    report: EvalReport,
}

fn run_job(job: &Job, model_cfg: &ModelConfig, train_cfg: &TrainConfig, every: usize) -> Result<FoldOutput> {
    let mut snapshots = Vec::new();
    let mut keep = |epoch: usize, m: &RcaModel| -> Result<()> {
        if every > 0 && epoch % every == 0 && epoch != train_cfg.epochs {
            snapshots.push((epoch, m.clone()));
        }
        Ok(())
    };
    let hooks = FitHooks {
        heldout: Some(&job.test),
        on_epoch: Some(&mut keep),
    };
    let result = fit_with(&job.train, model_cfg, train_cfg, hooks)?;
    let report = evaluate(&result.model, &job.test, train_cfg.feature_transform)?;
    Ok(FoldOutput {
        history: result.history,
        model: result.model,
        snapshots,
        report,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(method: &str, evaluation: &str, reports: &[EvalReport], bayes: Option<f64>) -> Summary {
    let domains = reports[0].domains.clone();
    let per_fold: Vec<Vec<f64>> = reports.iter().map(|r| r.per_domain.clone()).collect();
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..domains.len())
        .map(|d| mean_std(&per_fold.iter().map(|f| f[d]).collect::<Vec<_>>()))
        .unzip();
    let (average_mean, average_std) = mean_std(&reports.iter().map(|r| r.average).collect::<Vec<_>>());
    Summary {
        method: method.into(),
        evaluation: evaluation.into(),
        domains,
        per_fold,
        mean,
        std,
        average_mean,
        average_std,
        bayes_accuracy: bayes,
    }
}

/// Accuracy table with one row per summary, in percent.
pub fn format_table(rows: &[&Summary]) -> String {
    let domains = &rows[0].domains;
    let cell = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
    let mut header = vec!["method".to_string()];
    header.extend(domains.iter().cloned());
    header.push("AVG".into());
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.method.clone()];
        line.extend(r.mean.iter().zip(&r.std).map(|(m, s)| cell(*m, *s)));
        line.push(cell(r.average_mean, r.average_std));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn method_name(a: Alignment) -> &'static str {
    match a {
        Alignment::Joint => "rca",
        Alignment::Marginal => "marginal",
    }
}

/// Trains every fold and writes the run directory. Returns the summary.
fn run_into(resolved: &Resolved, loaded: &Loaded, out: &Path) -> Result<Summary> {
    let cfg = &resolved.config;
    if let Some(expected) = &resolved.expected_checksums {
        if expected != &loaded.checksums {
            return Err(RcaError::Data(format!(
                "data under {} does not match the manifest checksums",
                resolved.data_dir.display()
            )));
        }
    }
    let model_cfg = cfg.model_config(loaded.train.len());
    let train_cfg = cfg.train_config();
    let (evaluation, jobs) = jobs(loaded, cfg.run.folds, train_cfg.seed)?;
    let every = cfg.run.checkpoint_every;
    let results: Vec<Result<FoldOutput>> = jobs.par_iter().map(|j| run_job(j, &model_cfg, &train_cfg, every)).collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut outputs = Vec::new();
    for (f, r) in results.iter().enumerate() {
        let dir = format!("fold-{}", f + 1);
        let mut jsonl = String::new();
        for m in &r.history {
            jsonl.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            jsonl.push('\n');
        }
        let metrics = format!("{dir}/metrics.jsonl");
        write_file(&out.join(&metrics), jsonl.as_bytes())?;
        outputs.push(metrics);
        for (epoch, m) in &r.snapshots {
            let name = format!("{dir}/model-epoch-{epoch:04}.ckpt");
            write_parent(&out.join(&name))?;
            m.save_checkpoint(&out.join(&name))?;
            outputs.push(name);
        }
        let name = format!("{dir}/model.ckpt");
        r.model.save_checkpoint(&out.join(&name))?;
        outputs.push(name);
    }

    let reports: Vec<EvalReport> = results.into_iter().map(|r| r.report).collect();
    let summary = summarize(method_name(model_cfg.alignment), &evaluation, &reports, loaded.bayes_accuracy);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), format!("{json}\n").as_bytes())?;
    let mut text = format_table(&[&summary]);
    let _ = writeln!(text, "\n{evaluation}, seed {}", train_cfg.seed);
    if let Some(b) = loaded.bayes_accuracy {
        let _ = writeln!(text, "Bayes accuracy {:.2}", 100.0 * b);
    }
    write_file(&out.join("summary.txt"), text.as_bytes())?;
    write_file(&out.join("config.resolved.toml"), cfg.to_toml().as_bytes())?;
    outputs.extend(["summary.json", "summary.txt", "config.resolved.toml"].map(String::from));

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: train_cfg.seed,
        config: cfg.clone(),
        data_dir: resolved.data_dir.clone(),
        value_kind: loaded.value_kind,
        evaluation,
        checksums: loaded.checksums.clone(),
        outputs,
        bayes_accuracy: loaded.bayes_accuracy,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), format!("{json}\n").as_bytes())?;
    Ok(summary)
}

fn write_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) => std::fs::create_dir_all(p).map_err(|e| RcaError::io(p, e)),
        None => Ok(()),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<Summary> {
    let resolved = resolve(args)?;
    let loaded = load(&resolved.config, &resolved.data_dir)?;
    Ok(run_into(&resolved, &loaded, &args.out)?)
}

/// Result of [`cmd_ablate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<Summary>,
    /// Hash of every non-discriminator initial parameter, per method.
    pub initial_hashes: BTreeMap<String, String>,
}

/// Trains the joint (RCA) and marginal variants under one config and seed.
pub fn cmd_ablate(args: &TrainArgs) -> CliResult<Comparison> {
    let base = resolve(&TrainArgs {
        ablation: false,
        ..args.clone()
    })?;
    let loaded = load(&base.config, &base.data_dir)?;
    let mut rows = Vec::new();
    let mut initial_hashes = BTreeMap::new();
    for alignment in [Alignment::Joint, Alignment::Marginal] {
        let mut config = base.config.clone();
        config.model.alignment = alignment;
        let name = method_name(alignment);
        let init = RcaModel::init(config.model_config(loaded.train.len()), config.train.seed)?;
        initial_hashes.insert(name.to_string(), init.param_hash(|c| c != Component::Discriminator));
        let resolved = Resolved {
            config,
            data_dir: base.data_dir.clone(),
            expected_checksums: base.expected_checksums.clone(),
        };
        rows.push(run_into(&resolved, &loaded, &args.out.join(name))?);
    }
    let comparison = Comparison { rows, initial_hashes };
    let json = serde_json::to_string_pretty(&comparison).expect("comparison serializes");
    write_file(&args.out.join("comparison.json"), format!("{json}\n").as_bytes())?;
    let mut text = format_table(&comparison.rows.iter().collect::<Vec<_>>());
    for (name, hash) in &comparison.initial_hashes {
        let _ = writeln!(text, "initial shared/private/classifier hash ({name}): {hash}");
    }
    if let Some(b) = loaded.bayes_accuracy {
        let _ = writeln!(text, "Bayes accuracy {:.2}", 100.0 * b);
    }
    write_file(&args.out.join("comparison.txt"), text.as_bytes())?;
    Ok(comparison)
}
