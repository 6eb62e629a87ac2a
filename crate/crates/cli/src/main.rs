//! `cfdarts`: run the failure-guided search pipeline, or any single phase of
//! it, with every artifact written under an output directory.

mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cfdarts::pipeline::SelectionMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cfdarts", version, about = "Failure-guided differentiable architecture search")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the master seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData(Common),
    /// Corrupt a dataset file.
    Corrupt {
        /// `kind:severity:seed`, e.g. `gaussian_noise:3:1`.
        #[arg(long)]
        spec: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initial search, derivation and retraining on clean splits.
    Search {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Misclassified examples of a dataset under a model.
    Collect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Corruption that produced the input, recorded in the output.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Core set selection from a failure set.
    Select {
        #[arg(long)]
        model: PathBuf,
        /// Clean training split whose embeddings seed the centers.
        #[arg(long)]
        train: PathBuf,
        /// Failure set written by `collect`.
        #[arg(long)]
        failures: PathBuf,
        /// Dataset the failure ids refer to.
        #[arg(long)]
        corrupted: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Kcenter)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Failure-guided re-search and retraining.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `search`.
        #[arg(long)]
        initial: PathBuf,
        #[arg(long)]
        failures: PathBuf,
        #[arg(long)]
        corrupted: PathBuf,
    },
    /// Full experiment over the configured variants and seeds.
    Run(Common),
    /// Verify a run directory and print its report.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Kcenter,
    Random,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Kcenter => SelectionMode::Kcenter,
            ModeArg::Random => SelectionMode::Random,
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CFDARTS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("CFDARTS_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let log = commands::Log { quiet: cli.quiet };
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c, &log),
        Command::Corrupt { spec, input, out } => commands::corrupt(&spec, &input, &out, &log),
        Command::Search { common, data } => commands::search(&common, &data, &log),
        Command::Collect { model, input, spec, out } => commands::collect(&model, &input, spec.as_deref(), &out, &log),
        Command::Select {
            model,
            train,
            failures,
            corrupted,
            budget,
            mode,
            seed,
            out,
        } => commands::select(
            &commands::SelectArgs {
                model,
                train,
                failures,
                corrupted,
                budget,
                mode: mode.into(),
                seed,
            },
            &out,
            &log,
        ),
        Command::Refine {
            common,
            data,
            initial,
            failures,
            corrupted,
        } => commands::refine(&common, &data, &initial, &failures, &corrupted, &log),
        Command::Run(c) => commands::run(&c, &log),
        Command::Report { run_dir } => commands::report(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
