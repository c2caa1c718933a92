use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurovol_cli::{exit, parse_overrides, Axis, CliError, CliResult, RunConfig, Scope};

#[derive(Parser)]
#[command(name = "neurovol", version, about = "3D CNN classification of structural brain MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key can also be given as `--key value`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Worker threads (overrides `threads` in the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Configuration overrides, e.g. `--seed 7 --norm batch`.
    #[arg(value_name = "--KEY VALUE", allow_hyphen_values = true, trailing_var_arg = true, num_args = 0..)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the best checkpoint and the epoch log.
    Train(Common),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(Common),
    /// Train and evaluate once per value along one architecture/data axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. `1,2,4` or `instance,batch`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient saliency maps for every scan of a split.
    Saliency(Common),
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset and its manifest.
    Synth(Common),
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some(n) = common.threads {
        overrides.push(("threads".into(), n.to_string()));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => neurovol_cli::cmd_train(&load(&c)?).map(drop),
        Command::Eval(c) => neurovol_cli::cmd_eval(&load(&c)?).map(drop),
        Command::Ablate { axis, values, common } => neurovol_cli::cmd_ablate(&load(&common)?, axis, &values).map(drop),
        Command::Saliency(c) => neurovol_cli::cmd_saliency(&load(&c)?).map(drop),
        Command::Gradcheck { scope, common } => neurovol_cli::cmd_gradcheck(&load(&common)?, scope).map(drop),
        Command::Synth(c) => neurovol_cli::cmd_synth(&load(&c)?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
