//! Deterministic state machines for the three deployed contracts
//! (vessel registration, notification, emission data), the role-based access
//! list, and gas accounting.
//!
//! Every successful state-changing call is appended to a call log that can be
//! replayed from an empty world to reproduce the same state and gas totals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{evaluate_sulfur, ComplianceError, ComplianceResult};
use crate::ledger::ComplianceId;
use crate::model::{GeoPosition, ImoNumber};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("{role} may not call {op}")]
    PermissionDenied { role: Role, op: Operation },
    #[error("caller {caller:?} does not own vessel {imo}")]
    NotOwner { caller: String, imo: ImoNumber },
    #[error("contract {0} already deployed")]
    AlreadyDeployed(ContractKind),
    #[error("contract {0} not deployed")]
    NotDeployed(ContractKind),
    #[error("vessel {0} already registered")]
    AlreadyRegistered(ImoNumber),
    #[error("vessel {0} not registered")]
    NotFound(ImoNumber),
    #[error("no port state set for location {0:?}")]
    NoPortState(String),
    #[error("unknown gas operation {0:?}")]
    UnknownGasOp(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
    #[error("replay of call {seq} diverged: {detail}")]
    ReplayDiverged { seq: u64, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    VesselOwner,
    Crew,
    FlagState,
    PortState,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Admin,
        Role::VesselOwner,
        Role::Crew,
        Role::FlagState,
        Role::PortState,
    ];

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Admin => "admin",
            Role::VesselOwner => "vessel_owner",
            Role::Crew => "crew",
            Role::FlagState => "flag_state",
            Role::PortState => "port_state",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub caller_id: String,
    pub role: Role,
}

impl CallContext {
    pub fn new(caller_id: &str, role: Role) -> Self {
        CallContext {
            caller_id: caller_id.to_string(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    DeployContracts,
    RegisterVessel,
    IsVesselRegistered,
    GetFlagState,
    SetPortState,
    GetPortState,
    RecordEmission,
    GetNotifications,
    GetEmissionHistory,
}

impl Operation {
    pub const ALL: [Operation; 9] = [
        Operation::DeployContracts,
        Operation::RegisterVessel,
        Operation::IsVesselRegistered,
        Operation::GetFlagState,
        Operation::SetPortState,
        Operation::GetPortState,
        Operation::RecordEmission,
        Operation::GetNotifications,
        Operation::GetEmissionHistory,
    ];

    pub fn is_read(self) -> bool {
        matches!(
            self,
            Operation::IsVesselRegistered
                | Operation::GetFlagState
                | Operation::GetPortState
                | Operation::GetNotifications
                | Operation::GetEmissionHistory
        )
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operation::DeployContracts => "deployContracts",
            Operation::RegisterVessel => "registerVessel",
            Operation::IsVesselRegistered => "isVesselRegistered",
            Operation::GetFlagState => "getFlagState",
            Operation::SetPortState => "setPortState",
            Operation::GetPortState => "getPortState",
            Operation::RecordEmission => "recordEmission",
            Operation::GetNotifications => "getNotifications",
            Operation::GetEmissionHistory => "getEmissionHistory",
        };
        f.write_str(s)
    }
}

/// Access list. Rows follow the participant responsibility matrix; the admin
/// registers vessels and sets port states; anything unlisted is denied.
pub fn permits(role: Role, op: Operation) -> bool {
    use Operation::*;
    use Role::*;
    match op {
        // "Deploy and manage smart contracts": owner, flag state (plus the admin deployer).
        DeployContracts => matches!(role, Admin | VesselOwner | FlagState),
        RegisterVessel | SetPortState => role == Admin,
        // "Upload compliance data to blockchain": owner only.
        RecordEmission => role == VesselOwner,
        // "View vessel compliance data": owner, crew, flag state.
        GetEmissionHistory => matches!(role, VesselOwner | Crew | FlagState),
        // "Receive non-compliance notifications": flag state, port state.
        GetNotifications => matches!(role, FlagState | PortState),
        // Public registry and port-state views.
        IsVesselRegistered | GetFlagState | GetPortState => true,
    }
}

fn require(ctx: &CallContext, op: Operation) -> Result<(), ContractError> {
    if permits(ctx.role, op) {
        Ok(())
    } else {
        Err(ContractError::PermissionDenied { role: ctx.role, op })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContractKind {
    VesselRegistration,
    Notification,
    EmissionData,
}

impl ContractKind {
    pub const ALL: [ContractKind; 3] = [
        ContractKind::VesselRegistration,
        ContractKind::Notification,
        ContractKind::EmissionData,
    ];

    pub fn deploy_op(self) -> GasOp {
        match self {
            ContractKind::VesselRegistration => GasOp::DeployVesselRegistration,
            ContractKind::Notification => GasOp::DeployNotification,
            ContractKind::EmissionData => GasOp::DeployEmissionData,
        }
    }
}

impl fmt::Display for ContractKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Gas-charging operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GasOp {
    DeployVesselRegistration,
    DeployNotification,
    DeployEmissionData,
    RegisterVessel,
    SetPortState,
    RecordEmissionCompliant,
    RecordEmissionNonCompliant,
}

impl GasOp {
    pub const ALL: [GasOp; 7] = [
        GasOp::DeployVesselRegistration,
        GasOp::DeployNotification,
        GasOp::DeployEmissionData,
        GasOp::RegisterVessel,
        GasOp::SetPortState,
        GasOp::RecordEmissionCompliant,
        GasOp::RecordEmissionNonCompliant,
    ];

    /// Row label used in cost tables.
    pub fn label(self) -> &'static str {
        match self {
            GasOp::DeployVesselRegistration => "VesselRegistration",
            GasOp::DeployNotification => "Notification",
            GasOp::DeployEmissionData => "EmissionData",
            GasOp::RegisterVessel => "registerVessel",
            GasOp::SetPortState => "setPortState",
            GasOp::RecordEmissionCompliant => "recordEmission (Compliant)",
            GasOp::RecordEmissionNonCompliant => "recordEmission (Non-Compliant)",
        }
    }

    pub fn from_label(s: &str) -> Option<GasOp> {
        GasOp::ALL.into_iter().find(|op| op.label() == s)
    }

    pub fn is_deployment(self) -> bool {
        matches!(
            self,
            GasOp::DeployVesselRegistration | GasOp::DeployNotification | GasOp::DeployEmissionData
        )
    }
}

/// Gas units per operation plus the price conversion.
///
/// The defaults reproduce the measured contract costs. The 30 gwei gas price
/// and $0.33 token price are fitted to the deployment cost rows
/// (0.01995 token / 665,106 gas ≈ 3.0e-8; $0.0066 / 0.01995 ≈ 0.33).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasSchedule {
    pub units: BTreeMap<GasOp, u64>,
    /// Wei per gas unit (1 token = 10^18 wei).
    pub gas_price_wei: u64,
    /// Dollars per token.
    pub token_usd: Decimal,
}

pub const DEFAULT_GAS_PRICE_WEI: u64 = 30_000_000_000;

impl Default for GasSchedule {
    fn default() -> Self {
        let units = [
            (GasOp::DeployVesselRegistration, 665_106),
            (GasOp::DeployNotification, 1_188_150),
            (GasOp::DeployEmissionData, 1_235_115),
            (GasOp::RegisterVessel, 95_741),
            (GasOp::SetPortState, 49_077),
            (GasOp::RecordEmissionCompliant, 135_399),
            (GasOp::RecordEmissionNonCompliant, 378_909),
        ]
        .into_iter()
        .collect();
        GasSchedule {
            units,
            gas_price_wei: DEFAULT_GAS_PRICE_WEI,
            token_usd: Decimal::new(33, 2),
        }
    }
}

impl GasSchedule {
    pub fn check(&self) -> Result<(), ContractError> {
        for op in GasOp::ALL {
            match self.units.get(&op) {
                Some(u) if *u > 0 => {}
                _ => {
                    return Err(ContractError::InvalidArgument(format!(
                        "gas schedule needs a positive entry for {}",
                        op.label()
                    )))
                }
            }
        }
        if self.gas_price_wei == 0 || self.token_usd <= Decimal::ZERO {
            return Err(ContractError::InvalidArgument(
                "prices must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Prices `gas_units` at this schedule's rates.
    pub fn price(&self, gas_units: u64) -> GasReceipt {
        let wei = gas_units as i128 * self.gas_price_wei as i128;
        let token_cost = Decimal::from_i128_with_scale(wei, 18).normalize();
        let usd_cost = (token_cost * self.token_usd).normalize();
        let token_cost_rounded = round4(token_cost);
        let usd_cost_rounded = round4(token_cost_rounded * self.token_usd);
        GasReceipt {
            gas_units,
            token_cost,
            usd_cost,
            token_cost_rounded,
            usd_cost_rounded,
        }
    }

    pub fn charge(&self, op: GasOp) -> Result<GasReceipt, ContractError> {
        let units = self
            .units
            .get(&op)
            .ok_or_else(|| ContractError::UnknownGasOp(op.label().to_string()))?;
        Ok(self.price(*units))
    }
}

impl GasSchedule {
    /// Recovers the schedule a call log was priced with: units per operation
    /// from the receipts (defaults for operations never called), prices from
    /// the first paid receipt.
    pub fn inferred_from(log: &[CallRecord]) -> GasSchedule {
        let mut schedule = GasSchedule::default();
        for rec in log {
            schedule.units.insert(rec.gas_op, rec.receipt.gas_units);
        }
        if let Some(r) = log
            .iter()
            .map(|r| r.receipt)
            .find(|r| r.gas_units > 0 && !r.token_cost.is_zero())
        {
            let wei = r.token_cost * Decimal::from_i128_with_scale(1_000_000_000_000_000_000, 0)
                / Decimal::from(r.gas_units);
            if let Ok(w) = u64::try_from(wei.round()) {
                schedule.gas_price_wei = w;
            }
            schedule.token_usd = (r.usd_cost / r.token_cost).normalize();
        }
        schedule
    }
}

/// Charges the operation named by its table label, e.g. `"setPortState"`.
pub fn charge_gas(schedule: &GasSchedule, op_kind: &str) -> Result<GasReceipt, ContractError> {
    let op = GasOp::from_label(op_kind)
        .ok_or_else(|| ContractError::UnknownGasOp(op_kind.to_string()))?;
    schedule.charge(op)
}

pub fn round4(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(4, RoundingStrategy::MidpointAwayFromZero)
}

/// Cost of one call.
///
/// `token_cost` and `usd_cost` are exact. The `_rounded` pair is the
/// four-decimal form used in cost tables: the token cost rounded to 4 dp,
/// then converted to dollars and rounded to 4 dp again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GasReceipt {
    pub gas_units: u64,
    pub token_cost: Decimal,
    pub usd_cost: Decimal,
    pub token_cost_rounded: Decimal,
    pub usd_cost_rounded: Decimal,
}

impl GasReceipt {
    pub fn zero() -> Self {
        GasReceipt::default()
    }
}

impl Add for GasReceipt {
    type Output = GasReceipt;
    fn add(self, o: GasReceipt) -> GasReceipt {
        GasReceipt {
            gas_units: self.gas_units + o.gas_units,
            token_cost: self.token_cost + o.token_cost,
            usd_cost: self.usd_cost + o.usd_cost,
            token_cost_rounded: self.token_cost_rounded + o.token_cost_rounded,
            usd_cost_rounded: self.usd_cost_rounded + o.usd_cost_rounded,
        }
    }
}

impl Sum for GasReceipt {
    fn sum<I: Iterator<Item = GasReceipt>>(iter: I) -> Self {
        iter.fold(GasReceipt::zero(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VesselRecord {
    pub owner: String,
    pub flag_state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonComplianceNotification {
    pub vessel_imo: ImoNumber,
    pub message: String,
    pub flag_state: String,
    /// `None` when no port state is mapped for the location.
    pub port_state: Option<String>,
    pub location: String,
    pub timestamp: u64,
    pub compliance_id: Option<ComplianceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub timestamp: u64,
    pub sulfur_content: f64,
    pub position: GeoPosition,
    pub in_eca: bool,
    pub compliant: bool,
    pub compliance_id: Option<ComplianceId>,
}

/// Arguments of `recordEmission`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionSubmission {
    pub imo: ImoNumber,
    pub sulfur: f64,
    pub position: GeoPosition,
    pub in_eca: bool,
    pub location: String,
    pub timestamp: u64,
    pub compliance_id: Option<ComplianceId>,
}

/// A state-changing contract call, as stored in the call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case", deny_unknown_fields)]
pub enum Call {
    Deploy {
        contract: ContractKind,
    },
    RegisterVessel {
        imo: ImoNumber,
        owner: String,
        flag_state: String,
    },
    SetPortState {
        location: String,
        authority: String,
    },
    RecordEmission(EmissionSubmission),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallRecord {
    pub seq: u64,
    /// Block that carried the call; `None` for setup calls.
    pub block_height: Option<u64>,
    /// Simulated seconds the call's data refers to.
    pub at: u64,
    pub caller_id: String,
    pub role: Role,
    /// Vessel the cost is attributed to, if any.
    pub vessel: Option<ImoNumber>,
    pub gas_op: GasOp,
    pub call: Call,
    pub receipt: GasReceipt,
}

/// Where and when a call is applied; recorded in the call log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallMeta {
    pub block_height: Option<u64>,
    pub at: u64,
    pub vessel: Option<ImoNumber>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractWorld {
    schedule: GasSchedule,
    deployed: BTreeSet<ContractKind>,
    registry: BTreeMap<ImoNumber, VesselRecord>,
    port_states: BTreeMap<String, String>,
    notifications: Vec<NonComplianceNotification>,
    emissions: BTreeMap<ImoNumber, Vec<EmissionRecord>>,
    log: Vec<CallRecord>,
}

impl ContractWorld {
    pub fn new(schedule: GasSchedule) -> Self {
        ContractWorld {
            schedule,
            deployed: BTreeSet::new(),
            registry: BTreeMap::new(),
            port_states: BTreeMap::new(),
            notifications: Vec::new(),
            emissions: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn schedule(&self) -> &GasSchedule {
        &self.schedule
    }

    pub fn call_log(&self) -> &[CallRecord] {
        &self.log
    }

    pub fn is_deployed(&self, kind: ContractKind) -> bool {
        self.deployed.contains(&kind)
    }

    fn need(&self, kind: ContractKind) -> Result<(), ContractError> {
        if self.deployed.contains(&kind) {
            Ok(())
        } else {
            Err(ContractError::NotDeployed(kind))
        }
    }

    fn log_call(
        &mut self,
        ctx: &CallContext,
        meta: CallMeta,
        gas_op: GasOp,
        call: Call,
    ) -> GasReceipt {
        let receipt = self.schedule.charge(gas_op).unwrap_or_default();
        self.log.push(CallRecord {
            seq: self.log.len() as u64,
            block_height: meta.block_height,
            at: meta.at,
            caller_id: ctx.caller_id.clone(),
            role: ctx.role,
            vessel: meta.vessel,
            gas_op,
            call,
            receipt,
        });
        receipt
    }

    pub fn deploy(
        &mut self,
        ctx: &CallContext,
        kind: ContractKind,
    ) -> Result<GasReceipt, ContractError> {
        require(ctx, Operation::DeployContracts)?;
        if self.deployed.contains(&kind) {
            return Err(ContractError::AlreadyDeployed(kind));
        }
        self.deployed.insert(kind);
        Ok(self.log_call(
            ctx,
            CallMeta::default(),
            kind.deploy_op(),
            Call::Deploy { contract: kind },
        ))
    }

    /// Deploys all three contracts in order. Returns one receipt per contract.
    pub fn deploy_contracts(
        &mut self,
        ctx: &CallContext,
    ) -> Result<Vec<(ContractKind, GasReceipt)>, ContractError> {
        require(ctx, Operation::DeployContracts)?;
        if let Some(k) = ContractKind::ALL.iter().find(|k| self.deployed.contains(k)) {
            return Err(ContractError::AlreadyDeployed(*k));
        }
        ContractKind::ALL
            .iter()
            .map(|k| self.deploy(ctx, *k).map(|r| (*k, r)))
            .collect()
    }

    pub fn register_vessel(
        &mut self,
        ctx: &CallContext,
        imo: ImoNumber,
        owner: &str,
        flag_state: &str,
    ) -> Result<GasReceipt, ContractError> {
        require(ctx, Operation::RegisterVessel)?;
        self.need(ContractKind::VesselRegistration)?;
        if owner.is_empty() || flag_state.is_empty() {
            return Err(ContractError::InvalidArgument(
                "owner and flag state are required".into(),
            ));
        }
        if self.registry.contains_key(&imo) {
            return Err(ContractError::AlreadyRegistered(imo));
        }
        self.registry.insert(
            imo,
            VesselRecord {
                owner: owner.to_string(),
                flag_state: flag_state.to_string(),
            },
        );
        let meta = CallMeta {
            vessel: Some(imo),
            ..CallMeta::default()
        };
        let call = Call::RegisterVessel {
            imo,
            owner: owner.to_string(),
            flag_state: flag_state.to_string(),
        };
        Ok(self.log_call(ctx, meta, GasOp::RegisterVessel, call))
    }

    pub fn is_vessel_registered(&self, imo: ImoNumber) -> bool {
        self.registry.contains_key(&imo)
    }

    pub fn get_flag_state(&self, imo: ImoNumber) -> Result<&str, ContractError> {
        self.registry
            .get(&imo)
            .map(|r| r.flag_state.as_str())
            .ok_or(ContractError::NotFound(imo))
    }

    pub fn vessel(&self, imo: ImoNumber) -> Option<&VesselRecord> {
        self.registry.get(&imo)
    }

    pub fn set_port_state(
        &mut self,
        ctx: &CallContext,
        location: &str,
        authority: &str,
        meta: CallMeta,
    ) -> Result<GasReceipt, ContractError> {
        require(ctx, Operation::SetPortState)?;
        self.need(ContractKind::Notification)?;
        if location.is_empty() || authority.is_empty() {
            return Err(ContractError::InvalidArgument(
                "location and authority are required".into(),
            ));
        }
        self.port_states
            .insert(location.to_string(), authority.to_string());
        let call = Call::SetPortState {
            location: location.to_string(),
            authority: authority.to_string(),
        };
        Ok(self.log_call(ctx, meta, GasOp::SetPortState, call))
    }

    pub fn get_port_state(&self, location: &str) -> Result<&str, ContractError> {
        self.port_states
            .get(location)
            .map(String::as_str)
            .ok_or_else(|| ContractError::NoPortState(location.to_string()))
    }

    /// Stores an emission record and judges it. A violation files a
    /// notification carrying the vessel's flag state and the port state of
    /// `location`.
    pub fn record_emission(
        &mut self,
        ctx: &CallContext,
        sub: &EmissionSubmission,
        meta: CallMeta,
    ) -> Result<(ComplianceResult, GasReceipt), ContractError> {
        require(ctx, Operation::RecordEmission)?;
        self.need(ContractKind::EmissionData)?;
        self.need(ContractKind::Notification)?;
        let vessel = self
            .registry
            .get(&sub.imo)
            .ok_or(ContractError::NotFound(sub.imo))?;
        if vessel.owner != ctx.caller_id {
            return Err(ContractError::NotOwner {
                caller: ctx.caller_id.clone(),
                imo: sub.imo,
            });
        }
        let result = evaluate_sulfur(sub.sulfur, sub.in_eca)?;
        let flag_state = vessel.flag_state.clone();
        self.emissions
            .entry(sub.imo)
            .or_default()
            .push(EmissionRecord {
                timestamp: sub.timestamp,
                sulfur_content: sub.sulfur,
                position: sub.position,
                in_eca: sub.in_eca,
                compliant: result.compliant(),
                compliance_id: sub.compliance_id,
            });
        let gas_op = if result.compliant() {
            GasOp::RecordEmissionCompliant
        } else {
            let port = self.port_states.get(&sub.location).cloned();
            let message = format!(
                "{}: sulfur {:.6}% at {} ({})",
                result.message, sub.sulfur, sub.position, sub.location
            );
            self.report_non_compliance(NonComplianceNotification {
                vessel_imo: sub.imo,
                message,
                flag_state,
                port_state: port,
                location: sub.location.clone(),
                timestamp: sub.timestamp,
                compliance_id: sub.compliance_id,
            });
            GasOp::RecordEmissionNonCompliant
        };
        let meta = CallMeta {
            vessel: meta.vessel.or(Some(sub.imo)),
            ..meta
        };
        let receipt = self.log_call(ctx, meta, gas_op, Call::RecordEmission(sub.clone()));
        Ok((result, receipt))
    }

    /// Internal: only reachable through [`record_emission`](Self::record_emission).
    fn report_non_compliance(&mut self, n: NonComplianceNotification) {
        self.notifications.push(n);
    }

    pub fn get_notifications(
        &self,
        ctx: &CallContext,
    ) -> Result<&[NonComplianceNotification], ContractError> {
        require(ctx, Operation::GetNotifications)?;
        Ok(&self.notifications)
    }

    pub fn get_emission_history(
        &self,
        ctx: &CallContext,
        imo: ImoNumber,
    ) -> Result<&[EmissionRecord], ContractError> {
        require(ctx, Operation::GetEmissionHistory)?;
        if !self.registry.contains_key(&imo) {
            return Err(ContractError::NotFound(imo));
        }
        Ok(self.emissions.get(&imo).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// All notifications, bypassing the access list. For delivery and tests.
    pub fn notifications(&self) -> &[NonComplianceNotification] {
        &self.notifications
    }

    pub fn registered_vessels(&self) -> impl Iterator<Item = (&ImoNumber, &VesselRecord)> {
        self.registry.iter()
    }

    /// Reads cost nothing.
    pub fn read_receipt(&self, op: Operation) -> Option<GasReceipt> {
        op.is_read().then(GasReceipt::zero)
    }

    pub fn total_gas(&self) -> GasReceipt {
        self.log.iter().map(|r| r.receipt).sum()
    }

    /// Applies one logged call to this world.
    pub fn apply(&mut self, rec: &CallRecord) -> Result<GasReceipt, ContractError> {
        let ctx = CallContext::new(&rec.caller_id, rec.role);
        let meta = CallMeta {
            block_height: rec.block_height,
            at: rec.at,
            vessel: rec.vessel,
        };
        let receipt = match &rec.call {
            Call::Deploy { contract } => {
                require(&ctx, Operation::DeployContracts)?;
                if self.deployed.contains(contract) {
                    return Err(ContractError::AlreadyDeployed(*contract));
                }
                self.deployed.insert(*contract);
                self.log_call(&ctx, meta, contract.deploy_op(), rec.call.clone())
            }
            Call::RegisterVessel {
                imo,
                owner,
                flag_state,
            } => {
                let r = self.register_vessel(&ctx, *imo, owner, flag_state)?;
                // register_vessel logs without block metadata; patch it in.
                if let Some(last) = self.log.last_mut() {
                    last.block_height = meta.block_height;
                    last.at = meta.at;
                    last.vessel = meta.vessel;
                }
                r
            }
            Call::SetPortState {
                location,
                authority,
            } => self.set_port_state(&ctx, location, authority, meta)?,
            Call::RecordEmission(sub) => self.record_emission(&ctx, sub, meta)?.1,
        };
        Ok(receipt)
    }

    /// Rebuilds a world by applying `log` in order, checking each receipt and
    /// gas operation against the logged one.
    pub fn replay(
        schedule: GasSchedule,
        log: &[CallRecord],
    ) -> Result<ContractWorld, ContractError> {
        let mut world = ContractWorld::new(schedule);
        for rec in log {
            let receipt = world.apply(rec)?;
            let applied = world.log.last().expect("apply logs the call");
            if receipt != rec.receipt || applied.gas_op != rec.gas_op || applied.seq != rec.seq {
                return Err(ContractError::ReplayDiverged {
                    seq: rec.seq,
                    detail: format!("logged {:?}, replayed {:?}", rec.gas_op, applied.gas_op),
                });
            }
        }
        Ok(world)
    }
}

pub fn write_call_log(log: &[CallRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("call record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a call log; errors carry the 1-based line number.
pub fn read_call_log(text: &str) -> Result<Vec<CallRecord>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}
