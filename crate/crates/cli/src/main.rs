use std::io::{self, Write};
use std::process::ExitCode;

use aftkm::Method;
use aftkm_cli::commands::{CalibrateArgs, QqArgs, SimulateArgs};
use aftkm_cli::{cmd_calibrate, cmd_qq, cmd_scan, cmd_simulate, cmd_test, DataArgs, ScanConfig, Status};
use anyhow::Result;
use clap::{Parser, Subcommand};

/// Kernel association tests for left-truncated competing-risks data.
///
/// Exit codes: 0 success, 1 error, 2 result flagged (e.g. degenerate spectrum).
#[derive(Parser, Debug)]
#[command(name = "aftkm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test all markers in the genotype file as one set
    Test(DataArgs),
    /// Test every gene set against one null fit and apply FDR thresholds
    Scan(DataArgs),
    /// Write a simulated dataset
    Simulate(SimulateArgs),
    /// Monte Carlo size/power study
    Calibrate(CalibrateArgs),
    /// Uniform Q-Q table, KS statistic and optional SVG for p-values
    Qq(QqArgs),
}

fn run(cli: Cli) -> Result<Status> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let status = match cli.command {
        Command::Test(args) => cmd_test(&ScanConfig::resolve(&args, Method::R)?, &mut out)?,
        Command::Scan(args) => {
            let cfg = ScanConfig::resolve(&args, Method::Rc)?;
            let s = cmd_scan(&cfg)?;
            writeln!(out, "sets\tfailed\tflagged\tdiscoveries")?;
            writeln!(out, "{}\t{}\t{}\t{}", s.sets, s.failed, s.flagged, s.discoveries.len())?;
            Status::Clean
        }
        Command::Simulate(args) => cmd_simulate(&args)?,
        Command::Calibrate(args) => {
            cmd_calibrate(&args, &mut out)?;
            Status::Clean
        }
        Command::Qq(args) => cmd_qq(&args, &mut out)?,
    };
    out.flush()?;
    Ok(status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
