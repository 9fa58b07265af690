use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use losslearn_cli::{commands, exit, report, CliError};

/// Learn loss functions by genetic programming and unrolled differentiation.
#[derive(Parser)]
#[command(name = "losslearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method end to end and write its artifacts.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train fresh learners with a frozen loss on the configured test tasks.
    MetaTest {
        /// Loss file (`loss_weights.json` or an s-expression), a run
        /// directory, or `baseline`.
        #[arg(long)]
        loss: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Tabulate mean ± sd of final performance per method and split.
    Report {
        /// Run directories, or directories of run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::MetaTrain { config } => {
            let dir = commands::meta_train(&config)?;
            println!("{}", dir.display());
            Ok(exit::SUCCESS)
        }
        Command::MetaTest { loss, config } => {
            let path = commands::meta_test(&loss, &config)?;
            println!("{}", path.display());
            Ok(exit::SUCCESS)
        }
        Command::Report { dirs, csv } => {
            let report = report::summarize(&dirs)?;
            for w in &report.warnings {
                log::warn!("skipped {w}");
            }
            print!("{}", report.to_text());
            if let Some(path) = csv {
                report.write_csv(&path)?;
            }
            Ok(if report.warnings.is_empty() {
                exit::SUCCESS
            } else {
                exit::WARNINGS
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
