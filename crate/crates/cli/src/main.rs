use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wrapless::harness::{run_scenario, run_suite, spv_demo, verify_report, Format, HarnessError, Report, Scenario};

#[derive(Parser)]
#[command(name = "wrapless", version, about = "Seeded scenarios for BTC-collateralized loan channels")]
struct Cli {
    /// Report rendering.
    #[arg(long, value_enum, global = true, default_value_t = Fmt::Json)]
    format: Fmt,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fmt {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a canned suite.
    Suite {
        #[arg(value_parser = ["payoff", "liquidation", "multiparty", "spv"])]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Light-client demos.
    Spv {
        #[command(subcommand)]
        command: SpvCommand,
    },
    /// Recompute a JSON-lines report's digest and compare it with its last line.
    VerifyReport { file: PathBuf },
}

#[derive(Subcommand)]
enum SpvCommand {
    /// Build a header chain, then overtake its tip with a longer fork.
    Demo {
        #[arg(long, default_value_t = 20)]
        blocks: u64,
        #[arg(long, default_value_t = 3)]
        reorg_depth: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })
}

fn emit(report: &Report, format: Format, out: Option<&PathBuf>) -> Result<bool, CliError> {
    let text = report.render(format);
    match out {
        Some(path) => {
            fs::write(path, &text).map_err(|source| CliError::Io { path: path.clone(), source })?;
            for (e, pass, actual) in report.verdicts() {
                println!("{} {e} (got {actual})", if pass { "PASS" } else { "FAIL" });
            }
        }
        None => print!("{text}"),
    }
    if let Err(e) = report.ensure_passed() {
        eprintln!("{e}");
        return Ok(false);
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let format = match cli.format {
        Fmt::Json => Format::Json,
        Fmt::Text => Format::Text,
    };
    match cli.command {
        Command::Run { file, seed, report } => {
            let mut sc = Scenario::from_json(&read(&file)?)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            emit(&run_scenario(&sc)?, format, report.as_ref())
        }
        Command::Suite { name, seed, report } => emit(&run_suite(&name, seed)?, format, report.as_ref()),
        Command::Spv { command: SpvCommand::Demo { blocks, reorg_depth, seed, report } } => {
            emit(&spv_demo(blocks, reorg_depth, seed)?, format, report.as_ref())
        }
        Command::VerifyReport { file } => {
            let digest = verify_report(&read(&file)?)?;
            println!("ok {digest}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
