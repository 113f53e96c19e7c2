use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixssl::objectives::PretextSet;
use mixssl::training::FinetuneMode;
use mixssl_cli::{cmd_ablate, cmd_finetune, cmd_pretrain, cmd_report, cmd_synth, CliError, Options, Overrides, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "mixssl", version, about = "Cross-domain mix-up self-supervised pretraining")]
#[command(after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, \
4 non-finite loss, 5 incompatible checkpoint.")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Defaults to start from when no config file names one
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,

    /// Run directory (default: $MIXSSL_OUTPUT_ROOT/<command> or runs/<command>)
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Pretext objectives, e.g. R,T
    #[arg(long, global = true)]
    pretext: Option<PretextSet>,

    /// Weight of the auxiliary objective
    #[arg(long, global = true)]
    gamma: Option<f64>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    batch_size: Option<usize>,

    #[arg(long, global = true)]
    lr: Option<f64>,

    /// Fine-tuning mode: probe or full
    #[arg(long, global = true)]
    mode: Option<FinetuneMode>,

    /// Pretrained checkpoint directory
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Log progress
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic target and auxiliary corpora
    Synth,
    /// Self-supervised pretraining on mixed batches
    Pretrain,
    /// Fine-tune or linear-probe a checkpoint and evaluate it
    Finetune,
    /// Pretrain, fine-tune and evaluate each objective selection
    Ablate,
    /// Compare finished runs and plot their loss curves
    Report {
        /// Run directories holding run.json
        runs: Vec<PathBuf>,
        /// Run name the others are compared against
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    Overrides {
        seed: cli.seed,
        pretext: cli.pretext,
        gamma: cli.gamma,
        epochs: cli.epochs,
        batch_size: cli.batch_size,
        learning_rate: cli.lr,
        mode: cli.mode,
        checkpoint: cli.checkpoint,
        output_dir: cli.output_dir,
    }
    .apply(&mut cfg);
    let opts = Options { force: cli.force };
    match cli.command {
        Command::Synth => {
            let m = cmd_synth(&cfg, opts)?;
            println!("wrote {}", m.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
        }
        Command::Pretrain => {
            let m = cmd_pretrain(&cfg, opts)?;
            println!("pretrained {} steps into {}", m.details["global_step"], cfg.output_dir("pretrain").display());
        }
        Command::Finetune => {
            let (_, report) = cmd_finetune(&cfg, opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate => {
            let (_, table) = cmd_ablate(&cfg, opts)?;
            print!("{}", table.to_text());
        }
        Command::Report { runs, baseline } => {
            let (table, _) = cmd_report(&runs, baseline.as_deref(), &cfg, opts)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
