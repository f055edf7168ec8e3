use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rca_cli::{cmd_ablate, cmd_gradcheck, cmd_synth, cmd_train, CliResult, TrainArgs};

#[derive(Parser)]
#[command(name = "rca", version, about = "Multi-domain text classification with regularized conditional alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunFlags {
    /// TOML config, or a manifest.json from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding one subdirectory per domain
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over folds (or test.tsv held-out sets)
    Train {
        #[command(flatten)]
        flags: RunFlags,
        /// Use the marginal (domain-only) discriminator
        #[arg(long)]
        ablation: bool,
    },
    /// Train RCA and the marginal ablation side by side
    Ablate {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Generate a synthetic Gaussian scenario
    Synth {
        /// Scenario JSON; defaults to the bundled misalignment scenario
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check every gradient against finite differences
    Gradcheck,
}

fn args(flags: RunFlags, ablation: bool) -> TrainArgs {
    TrainArgs {
        config: flags.config,
        data: flags.data,
        out: flags.out,
        seed: flags.seed,
        folds: flags.folds,
        ablation,
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { flags, ablation } => {
            let out = flags.out.clone();
            cmd_train(&args(flags, ablation))?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
        }
        Command::Ablate { flags } => {
            let out = flags.out.clone();
            cmd_ablate(&args(flags, false))?;
            print!("{}", std::fs::read_to_string(out.join("comparison.txt")).unwrap_or_default());
        }
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed)?,
        Command::Gradcheck => cmd_gradcheck(&mut std::io::stdout())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
