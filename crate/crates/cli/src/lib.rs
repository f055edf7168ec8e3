//! Library half of the `rca` binary: each subcommand is a function returning
//! a categorized error, so tests can drive them without spawning processes.

pub mod config;
pub mod run;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rca_core::data::{write_domain, write_test_split};
use rca_core::gradcheck::{run_checks, standard_checks, Check, COMPOSITE_TOLERANCE};
use rca_core::synthetic::{generate_synthetic, synthetic_model_config, synthetic_train_config, SyntheticScenario};
use rca_core::RcaError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::RunConfig;
pub use run::{cmd_ablate, cmd_train, TrainArgs};

/// Written next to synthetic domain directories.
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug)]
pub enum CliError {
    Core(RcaError),
    /// One or more gradient checks exceeded their tolerance.
    Gradcheck(Vec<String>),
}

impl From<RcaError> for CliError {
    fn from(e: RcaError) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gradcheck(names) => write!(f, "gradient check failed: {}", names.join(", ")),
        }
    }
}

impl CliError {
    /// 1 i/o and other, 2 config/usage, 3 data, 4 numeric, 5 gradcheck.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Gradcheck(_) => 5,
            CliError::Core(e) => match e {
                RcaError::Config(_) | RcaError::Usage(_) | RcaError::Dimension { .. } => 2,
                RcaError::Parse { .. } | RcaError::Data(_) => 3,
                RcaError::NonFinite { .. } => 4,
                RcaError::Io { .. } | RcaError::Checkpoint(_) | RcaError::Scheduling(_) => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> rca_core::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RcaError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| RcaError::io(path, e))
}

/// Runs the standard suite plus `extra`, printing one line per check.
pub fn cmd_gradcheck_with(extra: Vec<Check>, out: &mut dyn Write) -> CliResult<()> {
    let mut checks = standard_checks();
    checks.extend(extra);
    let results = run_checks(&checks)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() && r.max_rel_err < COMPOSITE_TOLERANCE { "ok" } else { "FAIL" };
        if verdict == "FAIL" {
            failed.push(r.name.clone());
        }
        let _ = writeln!(out, "{:width$}  max rel err {:.3e}  (tol {:.0e})  {verdict}", r.name, r.max_rel_err, r.tolerance);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed))
    }
}

pub fn cmd_gradcheck(out: &mut dyn Write) -> CliResult<()> {
    cmd_gradcheck_with(Vec::new(), out)
}

/// Ground truth written alongside generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub scenario: SyntheticScenario,
    pub input_dim: usize,
    pub bayes_accuracy: f64,
    pub bayes_accuracy_per_domain: Vec<f64>,
}

/// Writes domain directories, `scenario.json` and a matching `config.toml`.
/// Without a scenario file the bundled misalignment scenario is used.
pub fn cmd_synth(scenario_path: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut scenario = match scenario_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RcaError::io(p, e))?;
            let parsed: SyntheticScenario =
                serde_json::from_str(&text).map_err(|e| RcaError::Config(format!("{}: {e}", p.display())))?;
            parsed
        }
        None => SyntheticScenario::misalignment(),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let data = generate_synthetic(&scenario)?;
    for (train, test) in data.train.iter().zip(&data.test) {
        let dir = out_dir.join(&train.name);
        write_domain(&dir, train)?;
        write_test_split(&dir, &test.labeled)?;
    }
    let manifest = ScenarioManifest {
        input_dim: scenario.input_dim(),
        bayes_accuracy: data.bayes_accuracy,
        bayes_accuracy_per_domain: data.bayes_accuracy_per_domain,
        scenario: scenario.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out_dir.join(SCENARIO_FILE), format!("{json}\n").as_bytes())?;
    let mut cfg = RunConfig::from_parts(&synthetic_model_config(&scenario), &synthetic_train_config(0));
    cfg.run.values = config::ValueMode::Real;
    write_file(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        let code = |e: RcaError| CliError::from(e).exit_code();
        assert_eq!(code(RcaError::Config("x".into())), 2);
        assert_eq!(code(RcaError::Data("x".into())), 3);
        assert_eq!(
            code(RcaError::NonFinite {
                term: "L_c",
                step: 0,
                value: f64::NAN
            }),
            4
        );
        assert_eq!(CliError::Gradcheck(vec![]).exit_code(), 5);
    }
}
