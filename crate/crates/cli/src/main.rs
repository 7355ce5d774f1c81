use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dhnn_cli::{
    cmd_build, cmd_evaluate, cmd_ingest, cmd_inspect, cmd_run, cmd_synth, cmd_train, CliError, RunConfig,
    EXIT_CODES_HELP,
};
use dhnn_core::synthetic::SyntheticSpec;

/// Dynamic hypergraph forecasting pipeline.
///
/// Stages share one output directory: `ingest` writes the normalised
/// dataset, `build` the snapshot archive and initial checkpoint, `train` the
/// trained checkpoint and report, `evaluate` the test metrics. Set
/// DHNN_THREADS to cap worker threads.
#[derive(Parser)]
#[command(name = "dhnn", version, after_help = EXIT_CODES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set model.lr=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load, impute, transform and normalise the dataset.
    Ingest(ConfigArgs),
    /// Initialise the model and build one hypergraph snapshot per window.
    Build(ConfigArgs),
    /// Train on the training split with early stopping.
    Train(ConfigArgs),
    /// Score the trained model and the persistence baseline on the test split.
    Evaluate(ConfigArgs),
    /// Run ingest, build, train and evaluate in order.
    Run(ConfigArgs),
    /// Print one snapshot record from an archive.
    Inspect {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write a synthetic planted-community dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        communities: usize,
        #[arg(long, default_value_t = 4)]
        per_community: usize,
        #[arg(long, default_value_t = 3000)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// AR(1) coefficient of the latent factors.
        #[arg(long, default_value_t = 0.5)]
        phi: f64,
        /// Loading of every series on the shared market factor.
        #[arg(long, default_value_t = 1.0)]
        market_loading: f64,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DHNN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DHNN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a.load()?),
        Command::Build(a) => cmd_build(&a.load()?),
        Command::Train(a) => cmd_train(&a.load()?),
        Command::Evaluate(a) => cmd_evaluate(&a.load()?),
        Command::Run(a) => cmd_run(&a.load()?),
        Command::Inspect { file, index } => cmd_inspect(&file, index),
        Command::Synth {
            out,
            communities,
            per_community,
            length,
            noise,
            seed,
            phi,
            market_loading,
        } => {
            let spec = SyntheticSpec {
                phi,
                market_loading,
                ..SyntheticSpec::new(communities, per_community, length, noise, seed)
            };
            cmd_synth(&spec, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
