//! Command implementations behind the `ecaledger` binary.
//!
//! Each `cmd_*` function writes human-readable output to `out`, diagnostics
//! to `err`, and returns the process exit code. See [`exit`] for the codes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ecaledger_core::contracts::{
    permits, read_call_log, CallContext, CallRecord, ContractWorld, GasSchedule, Operation, Role,
};
use ecaledger_core::costs::{cost_report, render_csv, render_text};
use ecaledger_core::ledger::{load, verify_chain, Chain, LoadError};
use ecaledger_core::model::ImoNumber;
use ecaledger_core::scenario::{FleetScenario, ScenarioError};
use ecaledger_core::simnet::{run_scenario, SimError, CALLS_FILE};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    /// Missing, unreadable, unparsable or invalid input.
    pub const CONFIG: i32 = 2;
    /// The ledger failed verification.
    pub const TAMPERED: i32 = 3;
    pub const UNKNOWN_VESSEL: i32 = 4;
    pub const PERMISSION_DENIED: i32 = 5;
}

/// Default output directory when neither `--out` nor the environment sets one.
pub const DEFAULT_OUT_DIR: &str = "ecaledger-out";
pub const OUT_DIR_ENV: &str = "ECALEDGER_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (expected text or csv)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Text => "text",
            Format::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub scenario_path: Option<PathBuf>,
    pub ledger_path: Option<PathBuf>,
    /// Call log; defaults to `calls.jsonl` next to the ledger.
    pub calls_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub role: Option<Role>,
    pub vessel: Option<u64>,
    pub format: Format,
}

impl CliConfig {
    fn calls_path(&self) -> Option<PathBuf> {
        self.calls_path.clone().or_else(|| {
            self.ledger_path
                .as_ref()
                .map(|l| l.parent().unwrap_or(Path::new(".")).join(CALLS_FILE))
        })
    }
}

/// Runs a scenario and writes ledger, call log, metrics, per-block CSV and
/// mailboxes into the output directory.
pub fn cmd_run(config: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(path) = &config.scenario_path else {
        let _ = writeln!(err, "run: --scenario is required");
        return exit::CONFIG;
    };
    let mut scenario = match FleetScenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            return exit::CONFIG;
        }
    };
    if let Some(seed) = config.seed_override {
        scenario.seed = seed;
    }
    if let Some(eps) = config.epsilon {
        scenario.consistency.epsilon = eps;
    }
    if let Some(g) = config.gamma {
        scenario.consistency.gamma = g;
    }
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let output = match run_scenario(scenario) {
        Ok(o) => o,
        Err(SimError::Scenario(e @ ScenarioError::Invalid(_))) => {
            let _ = writeln!(err, "{e}");
            return exit::CONFIG;
        }
        Err(e) => {
            let _ = writeln!(err, "run failed: {e}");
            return exit::RUNTIME;
        }
    };
    if let Err(e) = output.write_to(&dir) {
        let _ = writeln!(err, "{e}");
        return exit::RUNTIME;
    }
    let m = &output.metrics;
    let _ = writeln!(
        out,
        "wrote {}: {} blocks, {} of {} transactions committed, {} notifications",
        dir.display(),
        m.blocks_produced,
        m.tx_committed,
        m.tx_submitted,
        m.notifications
    );
    exit::OK
}

fn load_ledger(config: &CliConfig, err: &mut dyn Write) -> Result<Chain, i32> {
    let Some(path) = &config.ledger_path else {
        let _ = writeln!(err, "--ledger is required");
        return Err(exit::CONFIG);
    };
    match load(path) {
        Ok(chain) => Ok(chain),
        Err(LoadError::NonCanonical { line }) => {
            let _ = writeln!(
                err,
                "record on line {line} is not in canonical form (altered)"
            );
            let _ = writeln!(err, "first bad height: {}", line - 1);
            Err(exit::TAMPERED)
        }
        Err(LoadError::Corrupt { line, message }) => {
            let _ = writeln!(err, "corrupt record on line {line}: {message}");
            let _ = writeln!(err, "first bad height: {}", line - 1);
            Err(exit::CONFIG)
        }
        Err(e) => {
            let _ = writeln!(err, "{e}");
            Err(exit::CONFIG)
        }
    }
}

/// Exit 0 iff the ledger loads and every hash, seal and link checks out.
pub fn cmd_verify(config: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let chain = match load_ledger(config, err) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match verify_chain(&chain) {
        Ok(()) => {
            let entries = chain.entries().count();
            let _ = writeln!(
                out,
                "ledger ok: {} blocks, {} entries",
                chain.len(),
                entries
            );
            exit::OK
        }
        Err(height) => {
            let _ = writeln!(err, "verification failed");
            let _ = writeln!(err, "first bad height: {height}");
            exit::TAMPERED
        }
    }
}

fn load_calls(config: &CliConfig, err: &mut dyn Write) -> Result<Vec<CallRecord>, i32> {
    let Some(path) = config.calls_path() else {
        let _ = writeln!(err, "--ledger or --calls is required");
        return Err(exit::CONFIG);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        let _ = writeln!(err, "cannot read call log {}: {e}", path.display());
        exit::CONFIG
    })?;
    read_call_log(&text).map_err(|(line, msg)| {
        let _ = writeln!(err, "call log {} line {line}: {msg}", path.display());
        exit::CONFIG
    })
}

/// Prints a vessel's emission history and the notifications visible to the
/// `--as` role. Access follows the contract access list.
pub fn cmd_inspect(config: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(role) = config.role else {
        let _ = writeln!(err, "inspect: --as <role> is required");
        return exit::CONFIG;
    };
    let chain = match load_ledger(config, err) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Err(height) = verify_chain(&chain) {
        let _ = writeln!(
            err,
            "ledger fails verification at height {height}; refusing to inspect"
        );
        return exit::TAMPERED;
    }
    let log = match load_calls(config, err) {
        Ok(l) => l,
        Err(code) => return code,
    };
    let world = match ContractWorld::replay(GasSchedule::inferred_from(&log), &log) {
        Ok(w) => w,
        Err(e) => {
            let _ = writeln!(err, "call log does not replay: {e}");
            return exit::CONFIG;
        }
    };
    let ctx = CallContext::new(role.as_str(), role);

    let vessel = match config.vessel {
        None => None,
        Some(n) => match ImoNumber::new(n) {
            Ok(imo) if world.is_vessel_registered(imo) => Some(imo),
            Ok(imo) => {
                let _ = writeln!(err, "unknown vessel {imo}");
                return exit::UNKNOWN_VESSEL;
            }
            Err(e) => {
                let _ = writeln!(err, "{e}");
                return exit::UNKNOWN_VESSEL;
            }
        },
    };

    let can_history = permits(role, Operation::GetEmissionHistory);
    let can_notify = permits(role, Operation::GetNotifications);
    if vessel.is_some() && !can_history {
        let _ = writeln!(
            err,
            "permission denied: {role} may not view emission history"
        );
        return exit::PERMISSION_DENIED;
    }
    if vessel.is_none() && !can_notify {
        let _ = writeln!(err, "permission denied: {role} may not view notifications");
        return exit::PERMISSION_DENIED;
    }

    if let Some(imo) = vessel {
        let history = world
            .get_emission_history(&ctx, imo)
            .expect("permission and registration checked");
        let flag = world.get_flag_state(imo).unwrap_or("?");
        let _ = writeln!(
            out,
            "vessel {imo} (flag {flag}): {} emission records",
            history.len()
        );
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:<24} {:<7} {:<14} {:<9} compliance_id",
            "timestamp", "sulfur", "position", "in_eca", "status", "on_chain"
        );
        for rec in history {
            let on_chain = rec.compliance_id.is_some_and(|id| chain.contains_id(id));
            let _ = writeln!(
                out,
                "{:<12} {:>10.6} {:<24} {:<7} {:<14} {:<9} {}",
                rec.timestamp,
                rec.sulfur_content,
                rec.position.to_string(),
                rec.in_eca,
                if rec.compliant {
                    "compliant"
                } else {
                    "non-compliant"
                },
                if on_chain { "yes" } else { "no" },
                rec.compliance_id.map(|i| i.to_hex()).unwrap_or_default()
            );
        }
    }

    if can_notify {
        let all = world.get_notifications(&ctx).expect("permission checked");
        let shown: Vec<_> = all
            .iter()
            .filter(|n| vessel.is_none_or(|v| n.vessel_imo == v))
            .collect();
        let _ = writeln!(out, "notifications: {}", shown.len());
        for n in shown {
            let _ = writeln!(
                out,
                "  {} vessel {} flag {} port {} at {}: {}",
                n.timestamp,
                n.vessel_imo,
                n.flag_state,
                n.port_state.as_deref().unwrap_or("-"),
                n.location,
                n.message
            );
        }
    }
    exit::OK
}

/// Cost tables (deployment, functions, per-vessel daily) from the call log.
pub fn cmd_report(config: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let log = match load_calls(config, err) {
        Ok(l) => l,
        Err(code) => return code,
    };
    let report = cost_report(&log);
    let text = match config.format {
        Format::Text => render_text(&report),
        Format::Csv => render_csv(&report),
    };
    if out.write_all(text.as_bytes()).is_err() {
        return exit::RUNTIME;
    }
    exit::OK
}
