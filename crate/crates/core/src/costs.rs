//! Cost tables aggregated from a call log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::contracts::{round4, CallRecord, GasOp, GasReceipt};
use crate::model::ImoNumber;

pub const SECONDS_PER_DAY: u64 = 86_400;

fn round_dp(d: Decimal, dp: u32) -> Decimal {
    d.round_dp_with_strategy(dp, RoundingStrategy::MidpointAwayFromZero)
}

/// One table row: a gas operation with its per-call figures and totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub operation: String,
    pub calls: u64,
    pub gas_per_call: u64,
    /// Per-call token cost as tabulated: 5 dp for deployments, 4 dp otherwise.
    pub token_per_call: Decimal,
    pub usd_per_call: Decimal,
    pub total_gas: u64,
    pub total_token: Decimal,
    pub total_usd: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselCost {
    pub imo: ImoNumber,
    pub uploads: u64,
    pub days: u64,
    /// Sum of the tabulated (4 dp) dollar costs of every upload call, per day.
    pub exact_daily_usd: Decimal,
    /// Per-upload cost including registration, rounded to cents/10, per day.
    pub headline_daily_usd: Decimal,
    pub headline_upload_usd: Vec<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub deployment: Vec<CostRow>,
    pub deployment_total_gas: u64,
    /// Sum of the tabulated per-contract token costs, rounded to 4 dp.
    pub deployment_total_token: Decimal,
    pub deployment_total_usd: Decimal,
    pub functions: Vec<CostRow>,
    pub total: GasReceipt,
    pub vessels: Vec<VesselCost>,
}

impl CostReport {
    pub fn row(&self, op: GasOp) -> Option<&CostRow> {
        self.deployment
            .iter()
            .chain(&self.functions)
            .find(|r| r.operation == op.label())
    }

    pub fn vessel(&self, imo: ImoNumber) -> Option<&VesselCost> {
        self.vessels.iter().find(|v| v.imo == imo)
    }
}

fn build_row(op: GasOp, receipts: &[GasReceipt]) -> CostRow {
    let first = receipts.first().copied().unwrap_or_default();
    let token_per_call = if op.is_deployment() {
        round_dp(first.token_cost, 5)
    } else {
        first.token_cost_rounded
    };
    let usd_per_call = if op.is_deployment() {
        round4(first.usd_cost)
    } else {
        first.usd_cost_rounded
    };
    let total: GasReceipt = receipts.iter().copied().sum();
    CostRow {
        operation: op.label().to_string(),
        calls: receipts.len() as u64,
        gas_per_call: first.gas_units,
        token_per_call,
        usd_per_call,
        total_gas: total.gas_units,
        total_token: total.token_cost,
        total_usd: total.usd_cost,
    }
}

/// Aggregates `log` into deployment and function tables plus per-vessel
/// daily costs.
///
/// An upload is a recordEmission call together with the setPortState calls
/// for the same vessel that precede it. Its exact cost is the sum of the
/// tabulated dollar costs; its headline cost adds the vessel's registration
/// and rounds to three decimals. Daily figures divide by the number of
/// distinct days that saw an upload.
pub fn cost_report(log: &[CallRecord]) -> CostReport {
    let mut by_op: BTreeMap<GasOp, Vec<GasReceipt>> = BTreeMap::new();
    for rec in log {
        by_op.entry(rec.gas_op).or_default().push(rec.receipt);
    }
    let rows = |deploy: bool| -> Vec<CostRow> {
        GasOp::ALL
            .into_iter()
            .filter(|op| op.is_deployment() == deploy)
            .map(|op| build_row(op, by_op.get(&op).map(Vec::as_slice).unwrap_or(&[])))
            .collect()
    };
    let deployment = rows(true);
    let functions = rows(false);

    let deployment_total_gas = deployment.iter().map(|r| r.total_gas).sum();
    let deployment_total_token = round4(
        deployment
            .iter()
            .map(|r| r.token_per_call * Decimal::from(r.calls))
            .sum(),
    );
    let deployment_total_usd = deployment
        .iter()
        .map(|r| r.usd_per_call * Decimal::from(r.calls))
        .sum();

    CostReport {
        deployment,
        deployment_total_gas,
        deployment_total_token,
        deployment_total_usd,
        functions,
        total: log.iter().map(|r| r.receipt).sum(),
        vessels: vessel_costs(log),
    }
}

fn vessel_costs(log: &[CallRecord]) -> Vec<VesselCost> {
    #[derive(Default)]
    struct Acc {
        register: Decimal,
        pending: Decimal,
        exact: Decimal,
        uploads: Vec<Decimal>,
        days: std::collections::BTreeSet<u64>,
    }
    let mut acc: BTreeMap<ImoNumber, Acc> = BTreeMap::new();
    for rec in log {
        let Some(imo) = rec.vessel else { continue };
        let a = acc.entry(imo).or_default();
        let usd = rec.receipt.usd_cost_rounded;
        match rec.gas_op {
            GasOp::RegisterVessel => a.register += usd,
            GasOp::SetPortState => a.pending += usd,
            GasOp::RecordEmissionCompliant | GasOp::RecordEmissionNonCompliant => {
                let upload = std::mem::take(&mut a.pending) + usd;
                a.exact += upload;
                a.uploads.push(round_dp(a.register + upload, 3));
                a.days.insert(rec.at / SECONDS_PER_DAY);
            }
            _ => {}
        }
    }
    acc.into_iter()
        .map(|(imo, a)| {
            let days = a.days.len() as u64;
            let per_day = |total: Decimal| {
                if days == 0 {
                    Decimal::ZERO
                } else {
                    total / Decimal::from(days)
                }
            };
            VesselCost {
                imo,
                uploads: a.uploads.len() as u64,
                days,
                exact_daily_usd: per_day(a.exact).normalize(),
                headline_daily_usd: per_day(a.uploads.iter().copied().sum()).normalize(),
                headline_upload_usd: a.uploads,
            }
        })
        .collect()
}

pub fn render_text(report: &CostReport) -> String {
    let mut out = String::new();
    let table = |out: &mut String, title: &str, rows: &[CostRow]| {
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<32} {:>6} {:>10} {:>10} {:>8} {:>12}",
            "operation", "calls", "gas", "token", "usd", "total gas"
        );
        for r in rows {
            let _ = writeln!(
                out,
                "{:<32} {:>6} {:>10} {:>10} {:>8} {:>12}",
                r.operation, r.calls, r.gas_per_call, r.token_per_call, r.usd_per_call, r.total_gas
            );
        }
    };
    table(&mut out, "Deployment", &report.deployment);
    let _ = writeln!(
        out,
        "deployment total: {} gas, {} token, ${}",
        report.deployment_total_gas, report.deployment_total_token, report.deployment_total_usd
    );
    out.push('\n');
    table(&mut out, "Functions", &report.functions);
    let _ = writeln!(
        out,
        "all calls: {} gas, {} token, ${}",
        report.total.gas_units,
        report.total.token_cost.normalize(),
        report.total.usd_cost.normalize()
    );
    out.push('\n');
    let _ = writeln!(out, "Per-vessel daily cost");
    let _ = writeln!(
        out,
        "{:<8} {:>8} {:>5} {:>12} {:>12}",
        "imo", "uploads", "days", "exact usd", "rounded usd"
    );
    for v in &report.vessels {
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>5} {:>12} {:>12}",
            v.imo, v.uploads, v.days, v.exact_daily_usd, v.headline_daily_usd
        );
    }
    out
}

pub fn render_csv(report: &CostReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |fields: [String; 9]| w.write_record(&fields).expect("in-memory csv write");
    put([
        "section",
        "operation",
        "calls",
        "gas_per_call",
        "token_per_call",
        "usd_per_call",
        "total_gas",
        "total_token",
        "total_usd",
    ]
    .map(String::from));
    for (section, rows) in [
        ("deployment", &report.deployment),
        ("function", &report.functions),
    ] {
        for r in rows {
            put([
                section.to_string(),
                r.operation.clone(),
                r.calls.to_string(),
                r.gas_per_call.to_string(),
                r.token_per_call.to_string(),
                r.usd_per_call.to_string(),
                r.total_gas.to_string(),
                r.total_token.normalize().to_string(),
                r.total_usd.normalize().to_string(),
            ]);
        }
    }
    put([
        "deployment_total".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        report.deployment_total_gas.to_string(),
        report.deployment_total_token.to_string(),
        report.deployment_total_usd.to_string(),
    ]);
    for v in &report.vessels {
        put([
            "vessel_daily".into(),
            v.imo.to_string(),
            v.uploads.to_string(),
            String::new(),
            String::new(),
            String::new(),
            v.days.to_string(),
            v.exact_daily_usd.to_string(),
            v.headline_daily_usd.to_string(),
        ]);
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{
        CallContext, CallMeta, ContractWorld, EmissionSubmission, GasSchedule, Role,
    };
    use crate::model::GeoPosition;
    use std::str::FromStr;

    fn dec(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn day_of_uploads(violations: &[u64]) -> ContractWorld {
        let admin = CallContext::new("admin", Role::Admin);
        let owner = CallContext::new("AcmeShipping", Role::VesselOwner);
        let imo = ImoNumber::new(9074729).unwrap();
        let mut w = ContractWorld::new(GasSchedule::default());
        w.deploy_contracts(&admin).unwrap();
        w.register_vessel(&admin, imo, "AcmeShipping", "Panama")
            .unwrap();
        for hour in 0..24u64 {
            let meta = CallMeta {
                block_height: Some(hour + 1),
                at: hour * 3600,
                vessel: Some(imo),
            };
            w.set_port_state(&admin, "USA-EastCoast", "USCG", meta)
                .unwrap();
            let sub = EmissionSubmission {
                imo,
                sulfur: if violations.contains(&hour) {
                    0.3
                } else {
                    0.05
                },
                position: GeoPosition::new(40.0, -70.0).unwrap(),
                in_eca: true,
                location: "USA-EastCoast".into(),
                timestamp: hour * 3600,
                compliance_id: None,
            };
            w.record_emission(&owner, &sub, meta).unwrap();
        }
        w
    }

    #[test]
    fn empty_log_is_all_zeros() {
        let r = cost_report(&[]);
        assert_eq!(r.deployment.len(), 3);
        assert_eq!(r.functions.len(), 4);
        for row in r.deployment.iter().chain(&r.functions) {
            assert_eq!((row.calls, row.gas_per_call, row.total_gas), (0, 0, 0));
            assert!(row.total_usd.is_zero());
        }
        assert_eq!(r.total, GasReceipt::zero());
        assert!(r.vessels.is_empty());
        assert!(render_text(&r).contains("deployment total: 0 gas"));
    }

    #[test]
    fn compliant_day() {
        let r = cost_report(day_of_uploads(&[]).call_log());
        assert_eq!(r.deployment_total_gas, 3_088_371);
        assert_eq!(r.deployment_total_token, dec("0.0926"));
        assert_eq!(r.row(GasOp::SetPortState).unwrap().calls, 24);
        let v = &r.vessels[0];
        assert_eq!((v.uploads, v.days), (24, 1));
        // 24 x (0.0005 + 0.0014)
        assert_eq!(v.exact_daily_usd, dec("0.0456"));
        // 24 x round3(0.0010 + 0.0005 + 0.0014)
        assert_eq!(v.headline_daily_usd, dec("0.072"));
    }

    #[test]
    fn violations_change_the_upload_cost() {
        let r = cost_report(day_of_uploads(&[3, 7]).call_log());
        let v = &r.vessels[0];
        assert_eq!(
            v.headline_upload_usd
                .iter()
                .filter(|u| **u == dec("0.005"))
                .count(),
            2
        );
        assert_eq!(
            v.exact_daily_usd,
            dec("0.0456") + dec("0.0024") * Decimal::from(2)
        );
        let bad = r.row(GasOp::RecordEmissionNonCompliant).unwrap();
        assert_eq!((bad.calls, bad.gas_per_call), (2, 378_909));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let text = render_csv(&cost_report(day_of_uploads(&[1]).call_log()));
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("section,operation,calls"));
        assert!(lines
            .iter()
            .any(|l| l.starts_with("function,setPortState,24,49077,0.0015,0.0005")));
        assert_eq!(lines.len(), 1 + 3 + 4 + 1 + 1);
    }
}
