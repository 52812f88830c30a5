use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcl_cli::commands::{cmd_eval, cmd_grad_check, cmd_run, cmd_sweep, cmd_synth, cmd_theory, Common, Format};
use gcl_cli::error::CliError;

#[derive(Parser)]
#[command(name = "gcl", version, about = "Nonlinear ICA by generalized contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            seed: a.seed,
            out: a.out,
            format: a.format,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it with a JSON sidecar.
    Synth(CommonArgs),
    /// Train and evaluate every configured seed.
    Run(CommonArgs),
    /// Run a config across segment counts and seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated segment counts.
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 50, 100, 300])]
        segments: Vec<usize>,
        /// Worker threads; GCL_DETERMINISTIC=1 forces 1.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check identifiability conditions of a family specification.
    Theory {
        /// Family specification and check (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic and numerical gradients of a fresh model.
    GradCheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Re-score a saved checkpoint against regenerated data.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a.into()),
        Command::Run(a) => cmd_run(&a.into()).map(|(_, text)| text),
        Command::Sweep { common, segments, jobs } => cmd_sweep(&common.into(), &segments, jobs).map(|(_, text)| text),
        Command::Theory { config } => cmd_theory(&config),
        Command::GradCheck { common, points, eps } => cmd_grad_check(&common.into(), points, eps),
        Command::Eval { common, checkpoint } => cmd_eval(&common.into(), &checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
