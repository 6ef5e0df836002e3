mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

/// Flow-aligned temporal shift video inpainting at desk scale.
#[derive(Parser)]
#[command(name = "tsam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// `key=value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips with masks and exact flows.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cycle-consistency validity mask of a flow pair.
    FlowValidity {
        #[arg(long)]
        fwd: PathBuf,
        #[arg(long)]
        bwd: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training on generated clips.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// A clip directory or a directory of clip directories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shift-only versus flow-aligned ablation on held-out clips.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the holes of one clip with a trained generator.
    Inpaint {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// TSR1 mask `[T, 1, H, W]` used instead of the clip's own masks.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and VFID-lite per mask kind.
    Eval {
        /// Ground-truth clip directory or directory of clip directories.
        #[arg(long)]
        gt: PathBuf,
        /// Predictions laid out like `--gt`, each holding `frames.tsr`.
        #[arg(long)]
        pred: PathBuf,
        /// Optional CSV copy of the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&commands::load_config(&config.config, &config.set)?, &out),
        Command::FlowValidity { fwd, bwd, delta, out } => commands::flow_validity(&fwd, &bwd, delta, &out),
        Command::Train { config, data, out } => {
            commands::train(&commands::load_config(&config.config, &config.set)?, &data, &out)
        }
        Command::Ablate { config, out } => commands::ablate(&commands::load_config(&config.config, &config.set)?, &out),
        Command::Inpaint { config, checkpoint, clip, mask, out } => commands::inpaint(
            &commands::load_config(&config.config, &config.set)?,
            &checkpoint,
            &clip,
            mask.as_deref(),
            &out,
        ),
        Command::Eval { gt, pred, out } => commands::eval(&gt, &pred, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
