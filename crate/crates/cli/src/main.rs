use clap::{Parser, Subcommand};
use ialab_cli::analyze::{self, AnalyzeFlags};
use ialab_cli::pipeline::{self, EvalFlags, GenFlags, TrainFlags};
use ialab_cli::repro::{self, ReproFlags};
use ialab_cli::{CliError, Report, Target};
use std::path::PathBuf;
use std::process::ExitCode;

/// Noise analysis, synthetic tasks and attention-variant training.
///
/// Exit codes: 0 success, 1 a tolerance check failed or the run could not
/// complete, 2 usage error.
#[derive(Parser, Debug)]
#[command(name = "ialab", version)]
struct Cli {
    /// Output directory for this run [default: $IALAB_OUT/<run>, or ./ialab-out/<run>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML file with one section per command; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Per-epoch and per-run progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo check of a closed form.
    Analyze {
        #[arg(value_enum)]
        kind: analyze::Kind,
        #[command(flatten)]
        flags: AnalyzeFlags,
    },
    /// Write a synthetic dataset.
    Gen(GenFlags),
    /// Train one model variant on one task.
    Train(TrainFlags),
    /// Score a checkpoint on a dataset split.
    Eval(EvalFlags),
    /// Regenerate a figure's data with pinned seeds.
    Repro {
        #[arg(value_enum)]
        figure: repro::Figure,
        #[command(flatten)]
        flags: ReproFlags,
    },
}

fn dispatch(cli: &Cli) -> Result<Report, CliError> {
    let target = Target {
        out: cli.out.clone(),
        config: cli.config.clone(),
        overwrite: cli.overwrite,
    };
    match &cli.command {
        Command::Analyze { kind, flags } => analyze::run(*kind, &target, flags),
        Command::Gen(f) => pipeline::gen(&target, f),
        Command::Train(f) => pipeline::run_train(&target, f, cli.verbose),
        Command::Eval(f) => pipeline::run_eval(&target, f),
        Command::Repro { figure, flags } => repro::run(*figure, &target, flags, cli.verbose),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(report) => {
            for c in &report.checks {
                println!("{c}");
            }
            println!("{}", report.summary_line());
            ExitCode::from(if report.passed() { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("ialab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
