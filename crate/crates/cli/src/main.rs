use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecaledger_cli::{cmd_inspect, cmd_report, cmd_run, cmd_verify, CliConfig, Format, OUT_DIR_ENV};
use ecaledger_core::contracts::Role;

/// Simulate, verify and inspect a sulfur-compliance ledger.
#[derive(Parser)]
#[command(name = "ecaledger", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fleet scenario and write its outputs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pairwise agreement tolerance for cross-sensor checks.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Window score below which a sensor pair is suspect.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Check every hash, seal and link of a ledger file.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Show emission history and notifications as a given role.
    Inspect {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        calls: Option<PathBuf>,
        #[arg(long = "as", value_parser = parse_role)]
        role: Role,
        #[arg(long)]
        vessel: Option<u64>,
    },
    /// Print gas and cost tables for a run.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        calls: Option<PathBuf>,
        #[arg(long, default_value_t = Format::Text)]
        format: Format,
    },
}

fn parse_role(s: &str) -> Result<Role, String> {
    Role::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Role::ALL.iter().map(|r| r.as_str()).collect();
        format!("unknown role {s:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut config = CliConfig::default();
    let run: fn(&CliConfig, &mut dyn io::Write, &mut dyn io::Write) -> i32 = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            epsilon,
            gamma,
        } => {
            config.scenario_path = Some(scenario);
            config.output_dir = out;
            config.seed_override = seed;
            config.epsilon = epsilon;
            config.gamma = gamma;
            cmd_run
        }
        Command::Verify { ledger } => {
            config.ledger_path = Some(ledger);
            cmd_verify
        }
        Command::Inspect {
            ledger,
            calls,
            role,
            vessel,
        } => {
            config.ledger_path = Some(ledger);
            config.calls_path = calls;
            config.role = Some(role);
            config.vessel = vessel;
            cmd_inspect
        }
        Command::Report {
            ledger,
            calls,
            format,
        } => {
            config.ledger_path = Some(ledger);
            config.calls_path = calls;
            config.format = format;
            cmd_report
        }
    };
    let code = run(&config, &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code as u8)
}
