//! `mridiff`: conditional-diffusion MRI reconstruction toolkit.
//!
//! One binary, five subcommands covering the full pipeline:
//! `phantom` builds a synthetic paired dataset, `train` fits the denoiser,
//! `infer` runs ensembled reconstruction, `eval` scores it, and `ablate`
//! sweeps the inference-time hyperparameters.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/IO error,
//! 4 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mridiff_core::error::Error;
use mridiff_core::io::Split;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mridiff", version, about = "Diffusion-based MRI reconstruction at desk scale")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set trainer.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Allow writing into a nonempty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired under/fully-sampled phantom datasets.
    Phantom {
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on the train split.
    Train {
        /// Dataset directory (from `phantom`).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint/log output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a split with a trained checkpoint.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions against the fully-sampled references.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
        /// Directory of `<id>.cmrs` reconstructions.
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep inference steps and ensemble rounds on the valid split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated inference step counts.
        #[arg(long, value_delimiter = ',', default_value = "25,50")]
        t_grid: Vec<usize>,
        /// Comma-separated ensemble round counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        r_grid: Vec<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::Incompatible(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Phantom { out } => commands::cmd_phantom(&cfg, out, cli.force),
        Command::Train { data, out } => commands::cmd_train(&cfg, data, out, cli.force),
        Command::Infer {
            data,
            split,
            checkpoint,
            out,
        } => commands::cmd_infer(&cfg, data, (*split).into(), checkpoint, out, cli.force),
        Command::Eval {
            data,
            split,
            recon,
            out,
        } => commands::cmd_eval(&cfg, data, (*split).into(), recon, out, cli.force),
        Command::Ablate {
            data,
            checkpoint,
            out,
            t_grid,
            r_grid,
        } => commands::cmd_ablate(&cfg, data, checkpoint, out, cli.force, t_grid, r_grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
