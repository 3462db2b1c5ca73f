use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpal::commands::{self, Context};
use dpal::{CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dpal", version, about = "Online test-time adaptation with dual-path lifting")]
struct Cli {
    /// Sectioned key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, adaptation and the theory batteries.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a setting, e.g. `--set adapt.lr=0.005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the source model and write its checkpoint.
    Train,
    /// Run online adaptation over every configured cell.
    Adapt,
    /// Frozen accuracy on clean and corrupted test streams.
    Eval,
    /// Dump per-layer domain-shift features.
    DumpFeatures,
    /// Dump last-layer class-token attention, frozen and adapted.
    DumpAttention,
    /// Run the smoothness and bound batteries.
    VerifyTheory,
    /// Rebuild the CSV summaries from finished run logs.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        for key in ["train.seed", "adapt.seeds", "theory.seed"] {
            cfg.set(&format!("{key}={s}"))?;
        }
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let mut ctx = Context::new(cfg, cli.out.clone());
    match cli.command {
        Command::Train => commands::train(&mut ctx).map(|_| ()),
        Command::Adapt => commands::adapt(&mut ctx).map(|o| {
            println!(
                "{} runs, {} resumed, {} summary rows",
                o.ran,
                o.skipped,
                o.summary.len()
            );
        }),
        Command::Eval => commands::eval(&mut ctx).map(|_| ()),
        Command::DumpFeatures => commands::dump_features(&mut ctx).map(|_| ()),
        Command::DumpAttention => commands::dump_attention(&mut ctx).map(|_| ()),
        Command::VerifyTheory => commands::verify_theory(&mut ctx),
        Command::Report => commands::report(&mut ctx).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
