use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cprl::attacks::AttackFamily;
use cprl::commands::{self, Inputs, Overrides};
use cprl::model::ModelKind;
use cprl::CprlError;

/// Soft-rank channel activation, PNS training and adversarial evaluation for
/// small quality regressors.
///
/// Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
/// 3 checkpoint error, 4 output directory error, 5 dataset error.
#[derive(Parser)]
#[command(name = "cprl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset archive and its scene split.
    Generate(Flags),
    /// Train a model and write checkpoints and the training curve.
    Train(Flags),
    /// Evaluate a checkpoint clean and under one attack.
    Attack(Flags),
    /// Evaluate a checkpoint over an epsilon grid.
    Sweep(Flags),
    /// Score landscapes around held-out images.
    Landscape(Flags),
    /// Clean and attacked channel activations, largest first.
    Dump(Flags),
    /// Print the effective configuration as JSON.
    PrintConfig(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Baseline,
    Cprl,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Fgsm,
    Pgd,
    Reflect,
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration; every key must be present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $CPRL_OUT_ROOT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    /// ℓ∞ budget in [0, 1] pixel units.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Mask bias b.
    #[arg(long)]
    b: Option<f64>,
    /// Soft-rank temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Train with the mask only, without intervention phases.
    #[arg(long)]
    no_pns: bool,
    /// Comma-separated ascending epsilon values.
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Model checkpoint for attack, sweep, landscape and dump.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory with manifest.csv (default: generate from config).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            model: self.model.map(|m| match m {
                ModelArg::Baseline => ModelKind::Baseline,
                ModelArg::Cprl => ModelKind::Cprl,
            }),
            attack: self.attack.map(|a| match a {
                AttackArg::Fgsm => AttackFamily::Fgsm,
                AttackArg::Pgd => AttackFamily::Pgd,
                AttackArg::Reflect => AttackFamily::ScoreReflection,
            }),
            epsilon: self.epsilon,
            bias: self.b,
            temperature: self.tau,
            no_pns: self.no_pns,
            epsilon_grid: self.epsilon_grid.clone(),
            epochs: self.epochs,
        }
    }

    fn inputs(&self) -> Inputs {
        Inputs {
            dataset: self.dataset.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CprlError> {
    let flags = match &cli.command {
        Command::Generate(f)
        | Command::Train(f)
        | Command::Attack(f)
        | Command::Sweep(f)
        | Command::Landscape(f)
        | Command::Dump(f)
        | Command::PrintConfig(f) => f,
    };
    let cfg = commands::effective_config(flags.config.as_deref(), &flags.overrides())?;
    let inputs = flags.inputs();
    let dir = match cli.command {
        Command::PrintConfig(_) => {
            emit(&cfg.to_json());
            return Ok(());
        }
        Command::Generate(_) => commands::cmd_generate(&cfg)?,
        Command::Train(_) => commands::cmd_train(&cfg, &inputs)?,
        Command::Attack(_) => commands::cmd_attack(&cfg, &inputs)?,
        Command::Sweep(_) => commands::cmd_sweep(&cfg, &inputs)?,
        Command::Landscape(_) => commands::cmd_landscape(&cfg, &inputs)?,
        Command::Dump(_) => commands::cmd_dump(&cfg, &inputs)?,
    };
    emit(&dir.display().to_string());
    Ok(())
}

/// Writes one stdout line; a closed pipe is not an error.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
