use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssm_core::analysis::EnsembleRule;
use ssm_lab::commands::{self, GradCamRequest, Overrides};
use ssm_lab::{CliError, CliResult};

/// Train, evaluate and analyse split-and-share classifiers.
///
/// Exit codes: 0 ok, 1 check failure or internal error, 2 config or usage
/// error, 3 dataset error, 4 IO error, 5 incompatible checkpoint/data.
#[derive(Parser)]
#[command(name = "ssm-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to read; repeat for `ensemble`, or pass to `train` to resume.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config precision (32 or 64).
    #[arg(long, global = true)]
    precision: Option<u32>,
    /// Head to visualize (1-based); all heads when omitted.
    #[arg(long, global = true)]
    head: Option<usize>,
    /// Test-set image index.
    #[arg(long, global = true)]
    image: Option<usize>,
    /// Target class; defaults to the image's label.
    #[arg(long, global = true)]
    class: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config; writes metrics.jsonl, best.ckpt and final.ckpt.
    Train,
    /// Combined, per-head and oracle accuracy of a checkpoint on its test split.
    Eval,
    /// Per-head Grad-CAM maps for one test image, as PGM files.
    Gradcam,
    /// Combine two or more checkpoints.
    Ensemble {
        #[arg(long, value_enum, default_value_t = Rule::MeanSoftmax)]
        rule: Rule,
    },
    /// Parameter counts of the backbone and of 1FC, 2FC, 3FC and SSM classifiers.
    Params,
    /// Finite-difference gradient checks of every layer and the full model.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    MeanSoftmax,
    MeanLogits,
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> CliResult<T> {
    value.clone().ok_or_else(|| CliError::Config(format!("{flag} is required")))
}

fn single_checkpoint(cli: &Cli) -> CliResult<PathBuf> {
    match cli.checkpoint.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(CliError::Config("--checkpoint is required".into())),
        _ => Err(CliError::Config("exactly one --checkpoint is expected".into())),
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Train => {
            let config = required(&cli.config, "--config")?;
            let resume = match cli.checkpoint.as_slice() {
                [] => None,
                [one] => Some(one.as_path()),
                _ => return Err(CliError::Config("train resumes from at most one --checkpoint".into())),
            };
            let overrides = Overrides { seed: cli.seed, precision: cli.precision, out: cli.out.clone() };
            commands::train(&config, resume, &overrides, out).map(drop)
        }
        Command::Eval => commands::eval(&single_checkpoint(cli)?, cli.config.as_deref(), cli.out.as_deref(), out).map(drop),
        Command::Gradcam => {
            let request = GradCamRequest { image: required(&cli.image, "--image")?, class: cli.class, head: cli.head };
            let ckpt = single_checkpoint(cli)?;
            let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("gradcam"));
            commands::gradcam(&ckpt, cli.config.as_deref(), &request, &out_dir, out).map(drop)
        }
        Command::Ensemble { rule } => {
            let rule = match rule {
                Rule::MeanSoftmax => EnsembleRule::MeanSoftmax,
                Rule::MeanLogits => EnsembleRule::MeanLogits,
            };
            commands::ensemble(&cli.checkpoint, rule, cli.config.as_deref(), cli.out.as_deref(), out).map(drop)
        }
        Command::Params => commands::params(&required(&cli.config, "--config")?, out).map(drop),
        Command::Gradcheck => commands::gradcheck(&required(&cli.config, "--config")?, out).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("ssm-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
