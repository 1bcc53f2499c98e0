//! Discrete-event harness: periodic data pulls run the monitoring cycle,
//! transactions queue up, and blocks are proposed, voted on and committed at
//! sampled block intervals. Contract calls execute when their block commits.
//!
//! The clock is event-driven; nothing sleeps. Every random draw comes from a
//! ChaCha8 stream derived from the scenario seed, one stream per purpose, so a
//! (seed, scenario) pair fixes every output byte.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{ComplianceError, RegulationRegistry};
use crate::consensus::{verify_candidate, ConsensusError, SlashEvent, ValidatorSet};
use crate::contracts::{
    Call, CallContext, CallMeta, ContractError, ContractKind, ContractWorld, EmissionSubmission,
    GasReceipt, NonComplianceNotification, Role,
};
use crate::costs::{cost_report, VesselCost};
use crate::geofence::{is_in_eca, EcaAtlas};
use crate::ledger::{
    assemble_block, generate_compliance_id, Chain, ComplianceId, LedgerEntry, LedgerError,
};
use crate::model::{
    hash_data_point, DataPoint, GeoPosition, ImoNumber, ModelError, Quantity, SensorReading,
};
use crate::scenario::{Fault, FleetScenario, ScenarioError, VesselSpec};
use crate::validation::{validate, ConsistencyTracker, Reason};

/// Caller id of the operator that deploys contracts, registers vessels and
/// sets port states.
pub const ADMIN_ID: &str = "admin";

/// Location label used when a position has no configured label and lies
/// outside every ECA.
pub const HIGH_SEAS: &str = "high-seas";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("contract call failed: {0}")]
    Contract(#[from] ContractError),
    #[error("consensus: {0}")]
    Consensus(#[from] ConsensusError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("data point: {0}")]
    Model(#[from] ModelError),
    #[error("compliance: {0}")]
    Compliance(#[from] ComplianceError),
    #[error("world not initialized: {0}")]
    Uninitialized(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A contract call waiting for its block.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedCall {
    pub ctx: CallContext,
    pub call: Call,
}

/// One queued transaction: a ledger entry plus the contract calls that
/// accompany it.
#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub entry: LedgerEntry,
    pub calls: Vec<QueuedCall>,
    /// Simulated second of the data pull that produced the entry.
    pub data_time: u64,
}

impl Transaction {
    pub fn bare(entry: LedgerEntry, data_time: u64) -> Self {
        Transaction {
            entry,
            calls: Vec::new(),
            data_time,
        }
    }
}

/// FIFO of pending transactions. Nothing is ever dropped: transactions leave
/// only by being committed.
#[derive(Debug, Clone, Default)]
pub struct TransactionQueue {
    items: VecDeque<Transaction>,
    submitted: u64,
    committed: u64,
    max_depth: usize,
}

impl TransactionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit_tx(&mut self, tx: Transaction) {
        self.items.push_back(tx);
        self.submitted += 1;
        self.max_depth = self.max_depth.max(self.items.len());
    }

    pub fn depth(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.items.iter()
    }

    /// Entries of the first `n` transactions.
    pub fn front_entries(&self, n: usize) -> Vec<LedgerEntry> {
        self.items.iter().take(n).map(|t| t.entry.clone()).collect()
    }

    fn commit_front(&mut self, n: usize) -> Vec<Transaction> {
        let n = n.min(self.items.len());
        self.committed += n as u64;
        self.items.drain(..n).collect()
    }

    /// `submitted == committed + depth`.
    pub fn conserved(&self) -> bool {
        self.submitted == self.committed + self.items.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceStatus {
    Compliant,
    NonCompliant,
}

impl ComplianceStatus {
    pub fn from_bit(bit: u8) -> Self {
        if bit == 1 {
            ComplianceStatus::Compliant
        } else {
            ComplianceStatus::NonCompliant
        }
    }
}

pub type ComplianceMap = BTreeMap<ComplianceId, ComplianceStatus>;

/// Queue counters after one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub time_s: f64,
    pub submitted: u64,
    pub committed: u64,
    pub depth: u64,
}

/// One row of the per-block CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub height: u64,
    pub time_s: f64,
    pub tx_count: usize,
    pub gas_units: u64,
    pub proposer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOutcome {
    /// Nothing was pending.
    Idle,
    Committed {
        height: u64,
        tx_count: usize,
    },
    Rejected {
        proposer: String,
        /// The candidate failed verification (as opposed to being outvoted).
        invalid: bool,
        slashed: Vec<SlashEvent>,
    },
}

/// A delivered notification as it appears in a recipient's mailbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MailItem {
    pub vessel_imo: ImoNumber,
    pub compliance_id: Option<ComplianceId>,
    pub location: String,
    pub timestamp: u64,
    pub message: String,
}

/// Recipient (`flag:<state>` or `port:<authority>`) → delivered items in order.
pub type Mailboxes = BTreeMap<String, Vec<MailItem>>;

pub fn flag_mailbox(flag_state: &str) -> String {
    format!("flag:{flag_state}")
}

pub fn port_mailbox(authority: &str) -> String {
    format!("port:{authority}")
}

/// Delivers every notification to the vessel's flag state and to the port
/// state of the violation location. Without a port state only the flag state
/// is served and a warning is logged.
pub fn deliver_notifications(notifications: &[NonComplianceNotification]) -> Mailboxes {
    let mut boxes = Mailboxes::new();
    for n in notifications {
        let item = MailItem {
            vessel_imo: n.vessel_imo,
            compliance_id: n.compliance_id,
            location: n.location.clone(),
            timestamp: n.timestamp,
            message: n.message.clone(),
        };
        boxes
            .entry(flag_mailbox(&n.flag_state))
            .or_default()
            .push(item.clone());
        match &n.port_state {
            Some(p) => boxes.entry(port_mailbox(p)).or_default().push(item),
            None => warn!(
                "no port state for {:?}; notification for vessel {} sent to flag state only",
                n.location, n.vessel_imo
            ),
        }
    }
    boxes
}

/// Consensus, ledger, contract world and queue, advanced one block at a time.
pub struct Network {
    pub chain: Chain,
    pub validators: ValidatorSet,
    pub world: ContractWorld,
    pub queue: TransactionQueue,
    capacity: usize,
    slash_fraction: f64,
    base_honesty: BTreeMap<String, bool>,
    validator_faults: Vec<Fault>,
    proposer_rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    blocks: Vec<BlockRow>,
    slashes: Vec<SlashEvent>,
    rejected: u64,
    refused_invalid: u64,
    latencies: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SENSORS: u64 = 1;
const STREAM_IDS: u64 = 2;
const STREAM_BLOCK_TIMES: u64 = 3;
const STREAM_PROPOSER: u64 = 4;
const STREAM_FAULTS: u64 = 5;

impl Network {
    pub fn new(
        validators: ValidatorSet,
        world: ContractWorld,
        capacity: usize,
        slash_fraction: f64,
        validator_faults: Vec<Fault>,
        seed: u64,
    ) -> Self {
        let base_honesty = validators
            .validators()
            .iter()
            .map(|v| (v.id.clone(), v.honest))
            .collect();
        Network {
            chain: Chain::new(),
            validators,
            world,
            queue: TransactionQueue::new(),
            capacity,
            slash_fraction,
            base_honesty,
            validator_faults,
            proposer_rng: stream(seed, STREAM_PROPOSER),
            fault_rng: stream(seed, STREAM_FAULTS),
            blocks: Vec::new(),
            slashes: Vec::new(),
            rejected: 0,
            refused_invalid: 0,
            latencies: Vec::new(),
        }
    }

    pub fn blocks(&self) -> &[BlockRow] {
        &self.blocks
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn slashes(&self) -> &[SlashEvent] {
        &self.slashes
    }

    /// Seconds from data pull to commit for every notification so far.
    pub fn latencies(&self) -> &[f64] {
        &self.latencies
    }

    fn apply_honesty(&mut self, now: f64) -> Result<(), SimError> {
        for (id, base) in &self.base_honesty {
            let turned = self.validator_faults.iter().any(|f| {
                matches!(f, Fault::DishonestValidator { validator, .. } if validator == id)
                    && f.active_at(now)
            });
            self.validators.set_honest(id, *base && !turned)?;
        }
        Ok(())
    }

    fn corrupts(&self, proposer: &str, now: f64) -> bool {
        self.validator_faults.iter().any(|f| {
            matches!(f, Fault::CorruptProposer { validator, .. } if validator == proposer)
                && f.active_at(now)
        })
    }

    /// Proposes, votes on and (if approved and valid) commits one block
    /// carrying up to `capacity` transactions from the queue head. Rejected
    /// blocks leave the queue untouched.
    pub fn produce_block(&mut self, now: f64) -> Result<BlockOutcome, SimError> {
        if self.queue.is_empty() {
            return Ok(BlockOutcome::Idle);
        }
        self.apply_honesty(now)?;
        let proposer = self
            .validators
            .select_proposer(&mut self.proposer_rng)?
            .id
            .clone();
        let n = self.capacity.min(self.queue.depth());
        let pending = self.queue.front_entries(n);
        let mut block = assemble_block(&pending, &proposer, &self.chain)?;
        if self.corrupts(&proposer, now) {
            let i = self.fault_rng.gen_range(0..n);
            let mut bytes = *block.entries[i].digest.as_bytes();
            bytes[0] ^= 1;
            block.entries[i].digest = crate::model::Digest::from_bytes(bytes);
            block.block_hash = block.compute_hash();
            block.seal = block.compute_seal();
        }
        let record = self.validators.vote(&block, &self.chain, &pending);
        let verification = verify_candidate(&block, &self.chain, &pending);

        if !(record.approved && verification.is_ok()) {
            self.rejected += 1;
            if record.approved {
                // Outvoted honest nodes never build on an invalid block.
                self.refused_invalid += 1;
            }
            let slashed = self.validators.detect_and_slash(
                &record,
                &block,
                &verification,
                self.slash_fraction,
            );
            debug!(
                "block from {proposer} rejected at t={now:.3}; {} slashed",
                slashed.len()
            );
            self.slashes.extend(slashed.iter().cloned());
            return Ok(BlockOutcome::Rejected {
                proposer,
                invalid: verification.is_err(),
                slashed,
            });
        }

        self.chain.append(block, &record)?;
        let height = self.chain.height();
        let txs = self.queue.commit_front(n);
        let mut gas = 0u64;
        for tx in &txs {
            let meta = CallMeta {
                block_height: Some(height),
                at: tx.data_time,
                vessel: Some(tx.entry.vessel_imo),
            };
            for qc in &tx.calls {
                let receipt = match &qc.call {
                    Call::SetPortState {
                        location,
                        authority,
                    } => self
                        .world
                        .set_port_state(&qc.ctx, location, authority, meta)?,
                    Call::RecordEmission(sub) => {
                        let (result, receipt) = self.world.record_emission(&qc.ctx, sub, meta)?;
                        if !result.compliant() {
                            self.latencies.push(now - tx.data_time as f64);
                        }
                        receipt
                    }
                    other => {
                        return Err(SimError::Uninitialized(format!(
                            "unexpected queued call {other:?}"
                        )));
                    }
                };
                gas += receipt.gas_units;
            }
        }
        self.blocks.push(BlockRow {
            height,
            time_s: now,
            tx_count: txs.len(),
            gas_units: gas,
            proposer,
        });
        Ok(BlockOutcome::Committed {
            height,
            tx_count: txs.len(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub min_s: Option<f64>,
    pub mean_s: Option<f64>,
    pub p95_s: Option<f64>,
    pub max_s: Option<f64>,
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
        LatencyStats {
            count: n,
            min_s: Some(s[0]),
            mean_s: Some(s.iter().sum::<f64>() / n as f64),
            p95_s: Some(s[rank]),
            max_s: Some(s[n - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub simulated_s: f64,
    pub pulls: u64,
    pub readings_collected: u64,
    /// Readings removed before commit, by reason.
    pub readings_removed: BTreeMap<String, u64>,
    pub spoof_suspected: u64,
    pub tx_submitted: u64,
    pub tx_committed: u64,
    pub queue_depth: u64,
    pub max_queue_depth: u64,
    pub blocks_produced: u64,
    pub blocks_rejected: u64,
    pub invalid_blocks_refused: u64,
    pub slash_events: Vec<SlashEvent>,
    pub final_stakes: BTreeMap<String, f64>,
    pub compliant_committed: u64,
    pub non_compliant_committed: u64,
    pub notifications: u64,
    pub mailbox_deliveries: u64,
    pub notification_latency: LatencyStats,
    /// Deployment and registration calls made before the first block.
    pub setup_gas: GasReceipt,
    /// Calls executed in committed blocks.
    pub operating_gas: GasReceipt,
    pub vessel_costs: Vec<VesselCost>,
}

/// Everything a run produces.
pub struct RunOutput {
    pub chain: Chain,
    pub world: ContractWorld,
    pub metrics: RunMetrics,
    pub mailboxes: Mailboxes,
    pub blocks: Vec<BlockRow>,
    pub queue_trace: Vec<QueueSample>,
    pub compliance_map: ComplianceMap,
}

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const CALLS_FILE: &str = "calls.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const BLOCKS_FILE: &str = "blocks.csv";
pub const MAILBOXES_FILE: &str = "mailboxes.json";

impl RunOutput {
    pub fn ledger_text(&self) -> String {
        self.chain.to_ndjson()
    }

    pub fn calls_text(&self) -> String {
        crate::contracts::write_call_log(self.world.call_log())
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize") + "\n"
    }

    pub fn mailboxes_json(&self) -> String {
        serde_json::to_string_pretty(&self.mailboxes).expect("mailboxes serialize") + "\n"
    }

    pub fn blocks_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.blocks.is_empty() {
            w.write_record(["height", "time_s", "tx_count", "gas_units", "proposer"])
                .expect("in-memory csv write");
        }
        for b in &self.blocks {
            w.serialize(b).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    /// Writes the five output files into `dir`, replacing any earlier run.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        let io = |path: &Path, source| SimError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            (LEDGER_FILE, self.ledger_text()),
            (CALLS_FILE, self.calls_text()),
            (METRICS_FILE, self.metrics_json()),
            (BLOCKS_FILE, self.blocks_csv()),
            (MAILBOXES_FILE, self.mailboxes_json()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

struct VesselState {
    spec: VesselSpec,
    imo: ImoNumber,
    owner: CallContext,
    tracker: ConsistencyTracker,
}

/// A scenario being simulated.
pub struct Simulation {
    scenario: FleetScenario,
    atlas: EcaAtlas,
    registry: RegulationRegistry,
    admin: CallContext,
    vessels: Vec<VesselState>,
    pub net: Network,
    sensor_rng: ChaCha8Rng,
    id_rng: ChaCha8Rng,
    block_rng: ChaCha8Rng,
    pulls: u64,
    readings_collected: u64,
    readings_removed: BTreeMap<String, u64>,
    spoof_suspected: u64,
}

fn reason_code(r: Reason) -> &'static str {
    match r {
        Reason::Ok => "ok",
        Reason::OutOfRange => "out_of_range",
        Reason::CalibrationExpired => "calibration_expired",
        Reason::Malformed => "malformed",
        Reason::StaleClock => "stale_clock",
        Reason::SuspectSensor => "suspect_sensor",
    }
}

impl Simulation {
    /// Validates the scenario, deploys the contracts and registers every vessel.
    pub fn new(scenario: FleetScenario) -> Result<Self, SimError> {
        let setup = scenario.check()?;
        let registry = RegulationRegistry::default();
        if !registry.contains(&scenario.regulation) {
            return Err(ScenarioError::Invalid(vec![format!(
                "unknown regulation {:?}",
                scenario.regulation
            )])
            .into());
        }
        let admin = CallContext::new(ADMIN_ID, Role::Admin);
        let mut world = ContractWorld::new(setup.schedule);
        world.deploy_contracts(&admin)?;
        let mut vessels = Vec::new();
        for spec in &scenario.vessels {
            let imo = ImoNumber::new(spec.imo)?;
            world.register_vessel(&admin, imo, &spec.owner, &spec.flag_state)?;
            vessels.push(VesselState {
                spec: spec.clone(),
                imo,
                owner: CallContext::new(&spec.owner, Role::VesselOwner),
                tracker: ConsistencyTracker::new(scenario.consistency.clone()),
            });
        }
        let validator_faults = scenario
            .faults
            .iter()
            .filter(|f| {
                matches!(
                    f,
                    Fault::DishonestValidator { .. } | Fault::CorruptProposer { .. }
                )
            })
            .cloned()
            .collect();
        let seed = scenario.seed;
        let net = Network::new(
            setup.validators,
            world,
            scenario.block_capacity,
            scenario.consensus.slash_fraction,
            validator_faults,
            seed,
        );
        Ok(Simulation {
            atlas: setup.atlas,
            registry,
            admin,
            vessels,
            net,
            sensor_rng: stream(seed, STREAM_SENSORS),
            id_rng: stream(seed, STREAM_IDS),
            block_rng: stream(seed, STREAM_BLOCK_TIMES),
            pulls: 0,
            readings_collected: 0,
            readings_removed: BTreeMap::new(),
            spoof_suspected: 0,
            scenario,
        })
    }

    pub fn scenario(&self) -> &FleetScenario {
        &self.scenario
    }

    fn remove(&mut self, reason: Reason) {
        *self
            .readings_removed
            .entry(reason_code(reason).to_string())
            .or_default() += 1;
    }

    /// One pass of the monitoring cycle at simulated second `t`: collect,
    /// validate (removing invalid readings), drop suspect sensors, hash and
    /// identify, judge compliance and queue the commit with its contract
    /// calls. Returns the compliance status of every queued data point.
    pub fn monitoring_cycle(&mut self, t: u64) -> Result<ComplianceMap, SimError> {
        for kind in ContractKind::ALL {
            if !self.net.world.is_deployed(kind) {
                return Err(SimError::Uninitialized(format!("{kind} not deployed")));
            }
        }
        self.pulls += 1;
        let now = self.scenario.epoch_base + t as i64;
        let tf = t as f64;
        let mut delta = ComplianceMap::new();

        for vi in 0..self.vessels.len() {
            let (imo, spec) = (self.vessels[vi].imo, self.vessels[vi].spec.clone());
            if !self.net.world.is_vessel_registered(imo) {
                return Err(SimError::Uninitialized(format!(
                    "vessel {imo} not registered"
                )));
            }
            let leg = spec
                .route
                .iter()
                .rev()
                .find(|l| l.from_s <= t)
                .expect("route starts at 0");
            let position = GeoPosition::new(leg.lat, leg.lon)?;
            let (in_eca, region) = is_in_eca(&position, &self.atlas);
            let location = leg
                .location
                .clone()
                .or(region)
                .unwrap_or_else(|| HIGH_SEAS.to_string());

            let mut true_sulfur = spec
                .fuel
                .iter()
                .rev()
                .find(|l| l.from_s <= t)
                .expect("fuel starts at 0")
                .sulfur;
            let mut reported_in_eca = None;
            for f in self.scenario.faults.iter().filter(|f| f.active_at(tf)) {
                match f {
                    Fault::FuelSwitch { vessel, sulfur, .. } if *vessel == spec.imo => {
                        true_sulfur = *sulfur
                    }
                    Fault::EcaSpoof {
                        vessel,
                        reported_in_eca: r,
                        ..
                    } if *vessel == spec.imo => reported_in_eca = Some(*r),
                    _ => {}
                }
            }

            // Collect and validate.
            let mut valid: Vec<(DataPoint, SensorReading)> = Vec::new();
            for sensor in &spec.sensors {
                let u: f64 = self.sensor_rng.gen();
                let mut value = true_sulfur + sensor.noise * (2.0 * u - 1.0);
                for f in self.scenario.faults.iter().filter(|f| f.active_at(tf)) {
                    match f {
                        Fault::OffsetDrift {
                            vessel,
                            sensor: s,
                            from_s,
                            rate_per_hour,
                            ..
                        } if *vessel == spec.imo && *s == sensor.id => {
                            value += rate_per_hour * (t - from_s) as f64 / 3600.0;
                        }
                        Fault::StuckAt {
                            vessel,
                            sensor: s,
                            value: v,
                            ..
                        }
                        | Fault::OutOfRange {
                            vessel,
                            sensor: s,
                            value: v,
                            ..
                        } if *vessel == spec.imo && *s == sensor.id => value = *v,
                        _ => {}
                    }
                }
                self.readings_collected += 1;
                let reading = SensorReading {
                    sensor_id: sensor.id.clone(),
                    quantity: Quantity::SulfurPct,
                    value,
                    time_index: now as u64,
                    wall_time: now + sensor.clock_skew_s,
                    calibration_expiry: sensor.calibration_expiry.unwrap_or(i64::MAX),
                };
                let Ok(d) =
                    DataPoint::from_reading(imo, &self.scenario.regulation, &reading, position)
                else {
                    debug!(
                        "vessel {imo} sensor {}: malformed reading removed",
                        sensor.id
                    );
                    self.remove(Reason::Malformed);
                    continue;
                };
                let verdict = validate(&d, &reading, &self.scenario.validation, now);
                if verdict.valid {
                    valid.push((d, reading));
                } else {
                    debug!(
                        "vessel {imo} sensor {} at t={t}: removed ({:?})",
                        sensor.id, verdict.reason
                    );
                    self.remove(verdict.reason);
                }
            }

            // Cross-sensor consistency.
            let values: BTreeMap<String, f64> = valid
                .iter()
                .map(|(_, r)| (r.sensor_id.clone(), r.value))
                .collect();
            let round = self.vessels[vi].tracker.observe(&values);
            let before = valid.len();
            valid.retain(|(_, r)| !round.excluded.contains(&r.sensor_id));
            for _ in valid.len()..before {
                self.remove(Reason::SuspectSensor);
            }

            for (d, _) in valid {
                let digest = hash_data_point(&d)?;
                let compliance_id = generate_compliance_id(&mut self.id_rng);
                let result = self.registry.evaluate(&d, &self.atlas)?;
                if let Some(r) = reported_in_eca {
                    if r != in_eca {
                        self.spoof_suspected += 1;
                        warn!(
                            "vessel {imo} reports in_eca={r} at {position} but the geofence says {in_eca}; suspected position spoofing"
                        );
                    }
                }
                let mut calls = Vec::new();
                if let Some(authority) = self.scenario.port_states.get(&location) {
                    calls.push(QueuedCall {
                        ctx: self.admin.clone(),
                        call: Call::SetPortState {
                            location: location.clone(),
                            authority: authority.clone(),
                        },
                    });
                }
                calls.push(QueuedCall {
                    ctx: self.vessels[vi].owner.clone(),
                    call: Call::RecordEmission(EmissionSubmission {
                        imo,
                        sulfur: d.value(),
                        position,
                        in_eca,
                        location: location.clone(),
                        timestamp: d.timestamp,
                        compliance_id: Some(compliance_id),
                    }),
                });
                delta.insert(compliance_id, ComplianceStatus::from_bit(result.bit));
                self.net.queue.submit_tx(Transaction {
                    entry: LedgerEntry {
                        compliance_id,
                        digest,
                        compliance_bit: result.bit,
                        vessel_imo: imo,
                        timestamp: d.timestamp,
                    },
                    calls,
                    data_time: t,
                });
            }
        }
        Ok(delta)
    }

    fn next_block_time(&mut self, after: f64) -> f64 {
        let [lo, hi] = self.scenario.block_time_range;
        let dt = if lo == hi {
            lo
        } else {
            self.block_rng.gen_range(lo..=hi)
        };
        after + dt
    }

    /// Runs the event loop to completion.
    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let duration = self.scenario.duration_s;
        let interval = self.scenario.pull_interval_s;
        let deadline = (duration + self.scenario.drain_timeout_s) as f64;
        let mut next_pull: Option<u64> = Some(0);
        let mut next_block: Option<f64> = None;
        let mut clock = 0.0f64;
        let mut trace = Vec::new();

        loop {
            let pull_first = match (next_pull, next_block) {
                (Some(p), Some(b)) => p as f64 <= b,
                (Some(_), None) => true,
                (None, Some(b)) if b <= deadline => false,
                _ => break,
            };
            if pull_first {
                let t = next_pull.expect("pull scheduled");
                clock = t as f64;
                self.monitoring_cycle(t)?;
                next_pull = Some(t + interval).filter(|p| *p < duration);
                if next_block.is_none() && !self.net.queue.is_empty() {
                    next_block = Some(self.next_block_time(clock));
                }
            } else {
                let b = next_block.take().expect("block scheduled");
                clock = b;
                self.net.produce_block(b)?;
                if !self.net.queue.is_empty() {
                    next_block = Some(self.next_block_time(b));
                }
            }
            let q = &self.net.queue;
            assert!(q.conserved(), "transaction conservation violated");
            trace.push(QueueSample {
                time_s: clock,
                submitted: q.submitted(),
                committed: q.committed(),
                depth: q.depth() as u64,
            });
        }
        Ok(self.finish(clock, trace))
    }

    fn finish(self, clock: f64, queue_trace: Vec<QueueSample>) -> RunOutput {
        let net = self.net;
        let mailboxes = deliver_notifications(net.world.notifications());
        let compliance_map: ComplianceMap = net
            .chain
            .entries()
            .map(|(_, e)| {
                (
                    e.compliance_id,
                    ComplianceStatus::from_bit(e.compliance_bit),
                )
            })
            .collect();
        let compliant = compliance_map
            .values()
            .filter(|s| **s == ComplianceStatus::Compliant)
            .count() as u64;
        let log = net.world.call_log();
        let metrics = RunMetrics {
            seed: self.scenario.seed,
            simulated_s: clock,
            pulls: self.pulls,
            readings_collected: self.readings_collected,
            readings_removed: self.readings_removed,
            spoof_suspected: self.spoof_suspected,
            tx_submitted: net.queue.submitted(),
            tx_committed: net.queue.committed(),
            queue_depth: net.queue.depth() as u64,
            max_queue_depth: net.queue.max_depth() as u64,
            blocks_produced: net.blocks.len() as u64,
            blocks_rejected: net.rejected,
            invalid_blocks_refused: net.refused_invalid,
            slash_events: net.slashes.clone(),
            final_stakes: net
                .validators
                .validators()
                .iter()
                .map(|v| (v.id.clone(), v.stake))
                .collect(),
            compliant_committed: compliant,
            non_compliant_committed: compliance_map.len() as u64 - compliant,
            notifications: net.world.notifications().len() as u64,
            mailbox_deliveries: mailboxes.values().map(|v| v.len() as u64).sum(),
            notification_latency: LatencyStats::of(&net.latencies),
            setup_gas: log
                .iter()
                .filter(|r| r.block_height.is_none())
                .map(|r| r.receipt)
                .sum(),
            operating_gas: log
                .iter()
                .filter(|r| r.block_height.is_some())
                .map(|r| r.receipt)
                .sum(),
            vessel_costs: cost_report(log).vessels,
        };
        RunOutput {
            chain: net.chain,
            world: net.world,
            metrics,
            mailboxes,
            blocks: net.blocks,
            queue_trace,
            compliance_map,
        }
    }
}

/// Validates and runs `scenario`.
pub fn run_scenario(scenario: FleetScenario) -> Result<RunOutput, SimError> {
    Simulation::new(scenario)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::Validator;
    use crate::contracts::GasSchedule;
    use crate::ledger::verify_chain;
    use crate::model::Digest;
    use crate::scenario::{FuelLeg, RouteLeg, SensorSpec};

    fn vessel(
        imo: u64,
        flag: &str,
        lat: f64,
        lon: f64,
        location: Option<&str>,
        sulfur: f64,
    ) -> VesselSpec {
        VesselSpec {
            imo,
            owner: format!("owner-{imo}"),
            flag_state: flag.into(),
            route: vec![RouteLeg {
                from_s: 0,
                lat,
                lon,
                location: location.map(str::to_string),
            }],
            fuel: vec![FuelLeg { from_s: 0, sulfur }],
            sensors: vec![SensorSpec {
                id: "s1".into(),
                noise: 0.0,
                calibration_expiry: None,
                clock_skew_s: 0,
            }],
        }
    }

    fn scenario(vessels: Vec<VesselSpec>) -> FleetScenario {
        let text = r#"
            seed = 11
            duration_s = 86400
            [[validators]]
            id = "a"
            stake = 1.0
            [[validators]]
            id = "b"
            stake = 3.0
            [port_states]
            "USA-EastCoast" = "USCG"
        "#;
        let mut s = FleetScenario::from_toml_str(text).unwrap();
        s.vessels = vessels;
        s
    }

    fn entry(i: u64) -> LedgerEntry {
        LedgerEntry {
            compliance_id: ComplianceId::from_u128(i as u128 + 1),
            digest: Digest::of(&i.to_be_bytes()),
            compliance_bit: 1,
            vessel_imo: ImoNumber::new(9074729).unwrap(),
            timestamp: i,
        }
    }

    fn bare_network(validators: Vec<Validator>, capacity: usize) -> Network {
        let set = ValidatorSet::new(validators, 2.0 / 3.0).unwrap();
        Network::new(
            set,
            ContractWorld::new(GasSchedule::default()),
            capacity,
            0.5,
            Vec::new(),
            3,
        )
    }

    #[test]
    fn queue_is_fifo_and_conserving() {
        let mut q = TransactionQueue::new();
        for i in 0..5 {
            q.submit_tx(Transaction::bare(entry(i), 0));
        }
        let ids: Vec<u64> = q.iter().map(|t| t.entry.timestamp).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let taken = q.commit_front(2);
        assert_eq!(taken[1].entry.timestamp, 1);
        assert_eq!((q.submitted(), q.committed(), q.depth()), (5, 2, 3));
        assert!(q.conserved());
        assert_eq!(q.max_depth(), 5);
    }

    #[test]
    fn burst_drains_in_capacity_steps() {
        let mut net = bare_network(
            vec![Validator::new("a", 1.0), Validator::new("b", 3.0)],
            100,
        );
        for i in 0..10_000 {
            net.queue.submit_tx(Transaction::bare(entry(i), 0));
        }
        assert_eq!(net.queue.depth(), 10_000);
        let mut blocks = 0;
        let mut t = 0.0;
        while !net.queue.is_empty() {
            t += 2.2;
            assert!(matches!(
                net.produce_block(t).unwrap(),
                BlockOutcome::Committed { tx_count: 100, .. }
            ));
            blocks += 1;
            assert!(net.queue.conserved());
        }
        // ceil(10_000 / 100)
        assert_eq!(blocks, 100);
        assert_eq!(net.queue.committed(), 10_000);
        assert_eq!(net.produce_block(t).unwrap(), BlockOutcome::Idle);
        verify_chain(&net.chain).unwrap();
    }

    #[test]
    fn dishonest_majority_rejects_everything() {
        let mut net = bare_network(
            vec![
                Validator::new("h", 1.0),
                Validator::new("d", 3.0).dishonest(),
            ],
            10,
        );
        let mut last = 0;
        for i in 0..50u64 {
            net.queue.submit_tx(Transaction::bare(entry(i), 0));
            let outcome = net.produce_block(i as f64).unwrap();
            assert!(matches!(
                outcome,
                BlockOutcome::Rejected { invalid: false, .. }
            ));
            assert!(net.queue.depth() > last);
            last = net.queue.depth();
        }
        assert_eq!(net.chain.height(), 0);
        assert!(net.slashes().is_empty());
    }

    #[test]
    fn corrupt_proposer_is_slashed_and_entries_stay_queued() {
        let set = ValidatorSet::new(
            vec![Validator::new("evil", 1.0), Validator::new("good", 3.0)],
            2.0 / 3.0,
        )
        .unwrap();
        let faults = vec![Fault::CorruptProposer {
            validator: "evil".into(),
            from_s: 0,
            to_s: 1_000_000,
        }];
        let mut net = Network::new(
            set,
            ContractWorld::new(GasSchedule::default()),
            4,
            0.5,
            faults,
            9,
        );
        let mut t = 0.0;
        let (mut rejected, mut committed) = (0, 0);
        for round in 0..40u64 {
            for i in 0..4 {
                net.queue
                    .submit_tx(Transaction::bare(entry(round * 4 + i), 0));
            }
            loop {
                t += 2.2;
                match net.produce_block(t).unwrap() {
                    BlockOutcome::Rejected {
                        proposer,
                        invalid,
                        slashed,
                    } => {
                        assert_eq!(proposer, "evil");
                        assert!(invalid);
                        assert_eq!(slashed[0].validator_id, "evil");
                        assert_eq!(net.queue.depth(), 4);
                        rejected += 1;
                    }
                    BlockOutcome::Committed { tx_count, .. } => {
                        assert_eq!(tx_count, 4);
                        committed += 1;
                        break;
                    }
                    BlockOutcome::Idle => unreachable!(),
                }
            }
        }
        assert!(rejected > 0);
        assert_eq!(committed, 40);
        assert!(net.validators.get("evil").unwrap().stake < 1.0);
        verify_chain(&net.chain).unwrap();
    }

    #[test]
    fn one_compliant_day() {
        let s = scenario(vec![vessel(
            9074729,
            "Panama",
            40.0,
            -70.0,
            Some("USA-EastCoast"),
            0.05,
        )]);
        let out = run_scenario(s).unwrap();
        let m = &out.metrics;
        assert_eq!(m.pulls, 24);
        assert_eq!((m.tx_submitted, m.tx_committed, m.queue_depth), (24, 24, 0));
        assert_eq!(m.blocks_produced, 24);
        assert_eq!(m.non_compliant_committed, 0);
        assert_eq!(m.notifications, 0);
        assert!(out.mailboxes.is_empty());
        assert_eq!(out.compliance_map.len(), 24);
        verify_chain(&out.chain).unwrap();
        for b in &out.blocks {
            let gap = b.time_s - (b.height - 1) as f64 * 3600.0;
            assert!((2.13..=2.32).contains(&gap), "{gap}");
        }
        let history = out
            .world
            .get_emission_history(
                &CallContext::new("x", Role::Crew),
                ImoNumber::new(9074729).unwrap(),
            )
            .unwrap();
        assert_eq!(history.len(), 24);
    }

    #[test]
    fn violations_notify_both_authorities() {
        let mut s = scenario(vec![
            vessel(9074729, "Panama", 40.0, -70.0, Some("USA-EastCoast"), 0.05),
            vessel(9321483, "Norway", 0.0, -30.0, None, 0.3),
        ]);
        s.faults.push(Fault::FuelSwitch {
            vessel: 9074729,
            from_s: 7200,
            to_s: 3 * 3600,
            sulfur: 0.2,
        });
        s.faults.push(Fault::FuelSwitch {
            vessel: 9321483,
            from_s: 0,
            to_s: 3600,
            sulfur: 0.9,
        });
        let out = run_scenario(s).unwrap();
        assert_eq!(out.metrics.non_compliant_committed, 2);
        assert_eq!(out.metrics.notifications, 2);
        assert_eq!(out.mailboxes["flag:Panama"].len(), 1);
        assert_eq!(out.mailboxes["port:USCG"].len(), 1);
        // High seas: flag state only.
        assert_eq!(out.mailboxes["flag:Norway"][0].location, HIGH_SEAS);
        assert_eq!(out.metrics.mailbox_deliveries, 3);
        let lat = &out.metrics.notification_latency;
        assert!(lat.min_s.unwrap() >= 2.13);
    }

    #[test]
    fn out_of_range_reading_is_removed_not_flagged() {
        let mut s = scenario(vec![vessel(
            9074729,
            "Panama",
            40.0,
            -70.0,
            Some("USA-EastCoast"),
            0.05,
        )]);
        s.faults.push(Fault::OutOfRange {
            vessel: 9074729,
            sensor: "s1".into(),
            at_s: 3600,
            value: 9.5,
        });
        let out = run_scenario(s).unwrap();
        assert_eq!(out.metrics.readings_removed.get("out_of_range"), Some(&1));
        assert_eq!(out.metrics.tx_committed, 23);
        assert_eq!(out.metrics.notifications, 0);
    }

    #[test]
    fn zero_vessels_give_genesis_only() {
        let out = run_scenario(scenario(Vec::new())).unwrap();
        assert_eq!(out.chain.len(), 1);
        let m = &out.metrics;
        assert_eq!(
            (m.tx_submitted, m.blocks_produced, m.notifications),
            (0, 0, 0)
        );
        assert_eq!(m.operating_gas, GasReceipt::zero());
        assert!(out.blocks_csv().starts_with("height,time_s"));
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.count, 4);
        assert_eq!(
            (s.min_s, s.max_s, s.mean_s, s.p95_s),
            (Some(1.0), Some(4.0), Some(2.5), Some(4.0))
        );
        assert_eq!(LatencyStats::of(&[]), LatencyStats::default());
    }
}
