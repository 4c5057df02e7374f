use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sanvirt::config::{load_config, ConfigError};
use sanvirt::fabric::TraceSink;
use sanvirt::report::{compare, comparison_csv, run_with_trace, ReportError};
use sanvirt::san::{ArchitectureMode, SanError};

#[derive(Parser)]
#[command(name = "sanvirt", version, about = "SAN virtualization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its JSON report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's architecture.
        #[arg(long)]
        arch: Option<ArchitectureMode>,
        /// Write the JSON Lines message trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario under several architectures and write a CSV table.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated architectures (default: all five).
        #[arg(long, value_delimiter = ',')]
        arch: Vec<ArchitectureMode>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and print its canonical form.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<SanError> for Failure {
    fn from(e: SanError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Run(e) => e.into(),
            ReportError::MismatchedWorkload(_) | ReportError::TooFew(_) => Failure::Config(e.into()),
            ReportError::Csv(_) => Failure::Runtime(e.into()),
        }
    }
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            arch,
            trace,
            out,
        } => {
            let mut config = load_config(&scenario)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(a) = arch {
                config.architecture = a;
            }
            config.validate()?;
            let sink = match &trace {
                Some(path) => {
                    let f = File::create(path)
                        .with_context(|| format!("creating {}", path.display()))
                        .map_err(runtime)?;
                    TraceSink::with_writer(Box::new(BufWriter::new(f)))
                }
                None => TraceSink::new(),
            };
            let report = run_with_trace(&config, sink)?;
            write_output(out.as_ref(), &(report.to_json() + "\n"))
        }
        Command::Compare { scenario, arch, out } => {
            let config = load_config(&scenario)?;
            let modes = if arch.is_empty() { ArchitectureMode::ALL.to_vec() } else { arch };
            let reports = compare(&config, &modes)?;
            write_output(out.as_ref(), &comparison_csv(&reports)?)
        }
        Command::Validate { scenario } => {
            let config = load_config(&scenario)?;
            println!("{}", config.to_canonical_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
