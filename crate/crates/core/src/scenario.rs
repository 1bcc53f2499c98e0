//! Fleet scenario files (TOML) and their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::consensus::{Validator, ValidatorSet, DEFAULT_SLASH_FRACTION, DEFAULT_THRESHOLD};
use crate::contracts::GasSchedule;
use crate::geofence::{EcaAtlas, EcaRegion};
use crate::model::{GeoPosition, ImoNumber, SULFUR_REGULATION};
use crate::validation::{ConsistencyConfig, ValidationRules};

/// Unix time of simulated second zero unless the scenario says otherwise.
pub const DEFAULT_EPOCH_BASE: i64 = 1_704_067_200;

#[derive(Debug)]
pub enum ScenarioError {
    Io {
        path: String,
        source: std::io::Error,
    },
    Parse(String),
    /// Every problem found, one per entry.
    Invalid(Vec<String>),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io { path, source } => {
                write!(f, "cannot read scenario {path}: {source}")
            }
            ScenarioError::Parse(m) => write!(f, "scenario parse error: {m}"),
            ScenarioError::Invalid(problems) => {
                write!(f, "scenario has {} problem(s):", problems.len())?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ScenarioError {}

fn default_pull_interval() -> u64 {
    3600
}
fn default_capacity() -> usize {
    100
}
fn default_block_times() -> [f64; 2] {
    [2.13, 2.32]
}
fn default_drain() -> u64 {
    3600
}
fn default_epoch() -> i64 {
    DEFAULT_EPOCH_BASE
}
fn default_regulation() -> String {
    SULFUR_REGULATION.to_string()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusParams {
    pub threshold_fraction: f64,
    pub slash_fraction: f64,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        ConsensusParams {
            threshold_fraction: DEFAULT_THRESHOLD,
            slash_fraction: DEFAULT_SLASH_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorSpec {
    pub id: String,
    pub stake: f64,
    #[serde(default = "default_true")]
    pub honest: bool,
}

/// Either a file path (relative to the scenario file), inline regions, or
/// neither for the built-in atlas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSource {
    pub path: Option<String>,
    pub regions: Vec<EcaRegion>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasParams {
    pub gas_price_wei: Option<u64>,
    pub token_usd: Option<Decimal>,
}

/// Position held from `from_s` until the next leg starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteLeg {
    pub from_s: u64,
    pub lat: f64,
    pub lon: f64,
    /// Port-state jurisdiction label; defaults to the ECA name or "high-seas".
    pub location: Option<String>,
}

/// Sulfur content of the fuel burned from `from_s` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuelLeg {
    pub from_s: u64,
    pub sulfur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    /// Half-width of the uniform measurement noise, in percent.
    #[serde(default)]
    pub noise: f64,
    /// Unix time the calibration certificate lapses; absent means never.
    pub calibration_expiry: Option<i64>,
    #[serde(default)]
    pub clock_skew_s: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselSpec {
    pub imo: u64,
    pub owner: String,
    pub flag_state: String,
    pub route: Vec<RouteLeg>,
    pub fuel: Vec<FuelLeg>,
    pub sensors: Vec<SensorSpec>,
}

/// Injected faults. Windows are half-open `[from_s, to_s)` in simulated seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Sensor reports a fixed value.
    StuckAt {
        vessel: u64,
        sensor: String,
        from_s: u64,
        to_s: u64,
        value: f64,
    },
    /// Sensor reading drifts linearly away from the true value.
    OffsetDrift {
        vessel: u64,
        sensor: String,
        from_s: u64,
        to_s: u64,
        rate_per_hour: f64,
    },
    /// Sensor reports `value` at the single pull at `at_s`.
    OutOfRange {
        vessel: u64,
        sensor: String,
        at_s: u64,
        value: f64,
    },
    /// Vessel burns fuel with the given sulfur content.
    FuelSwitch {
        vessel: u64,
        from_s: u64,
        to_s: u64,
        sulfur: f64,
    },
    /// Vessel reports an ECA status regardless of its position.
    EcaSpoof {
        vessel: u64,
        from_s: u64,
        to_s: u64,
        reported_in_eca: bool,
    },
    /// Validator inverts its votes.
    DishonestValidator {
        validator: String,
        from_s: u64,
        to_s: u64,
    },
    /// Validator corrupts one entry of every block it proposes.
    CorruptProposer {
        validator: String,
        from_s: u64,
        to_s: u64,
    },
}

impl Fault {
    fn window(&self) -> (u64, u64) {
        match self {
            Fault::StuckAt { from_s, to_s, .. }
            | Fault::OffsetDrift { from_s, to_s, .. }
            | Fault::FuelSwitch { from_s, to_s, .. }
            | Fault::EcaSpoof { from_s, to_s, .. }
            | Fault::DishonestValidator { from_s, to_s, .. }
            | Fault::CorruptProposer { from_s, to_s, .. } => (*from_s, *to_s),
            Fault::OutOfRange { at_s, .. } => (*at_s, at_s + 1),
        }
    }

    /// Whether the fault applies at simulated time `t` (seconds).
    pub fn active_at(&self, t: f64) -> bool {
        let (from, to) = self.window();
        t >= from as f64 && t < to as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetScenario {
    pub seed: u64,
    pub duration_s: u64,
    #[serde(default = "default_pull_interval")]
    pub pull_interval_s: u64,
    #[serde(default = "default_capacity")]
    pub block_capacity: usize,
    #[serde(default = "default_block_times")]
    pub block_time_range: [f64; 2],
    /// Extra simulated time allowed after `duration_s` to drain the queue.
    #[serde(default = "default_drain")]
    pub drain_timeout_s: u64,
    #[serde(default = "default_epoch")]
    pub epoch_base: i64,
    #[serde(default = "default_regulation")]
    pub regulation: String,
    #[serde(default)]
    pub consensus: ConsensusParams,
    #[serde(default)]
    pub validators: Vec<ValidatorSpec>,
    #[serde(default)]
    pub validation: ValidationRules,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub atlas: AtlasSource,
    #[serde(default)]
    pub gas: GasParams,
    /// Location label → port-state authority.
    #[serde(default)]
    pub port_states: BTreeMap<String, String>,
    #[serde(default)]
    pub vessels: Vec<VesselSpec>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Directory relative atlas paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Objects derived from a scenario that passed validation.
#[derive(Debug, Clone)]
pub struct Setup {
    pub atlas: EcaAtlas,
    pub validators: ValidatorSet,
    pub schedule: GasSchedule,
}

impl FleetScenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut s = Self::from_toml_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn vessel(&self, imo: u64) -> Option<&VesselSpec> {
        self.vessels.iter().find(|v| v.imo == imo)
    }

    fn resolve_atlas(&self) -> Result<EcaAtlas, String> {
        match (&self.atlas.path, self.atlas.regions.is_empty()) {
            (Some(_), false) => Err("atlas: give either path or regions, not both".into()),
            (Some(p), true) => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(p),
                    None => PathBuf::from(p),
                };
                EcaAtlas::load(&path).map_err(|e| format!("atlas: {e}"))
            }
            (None, false) => {
                EcaAtlas::new(self.atlas.regions.clone()).map_err(|e| format!("atlas: {e}"))
            }
            (None, true) => Ok(EcaAtlas::default_ecas()),
        }
    }

    /// Checks the whole scenario and reports every problem at once.
    pub fn check(&self) -> Result<Setup, ScenarioError> {
        let mut problems = Vec::new();
        let mut bad = |m: String| problems.push(m);

        if self.duration_s == 0 {
            bad("duration_s must be > 0".into());
        }
        if self.pull_interval_s == 0 {
            bad("pull_interval_s must be > 0".into());
        }
        if self.block_capacity == 0 {
            bad("block_capacity must be > 0".into());
        }
        let [lo, hi] = self.block_time_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            bad(format!("block_time_range [{lo}, {hi}] needs 0 < lo <= hi"));
        }
        if self.regulation.is_empty() {
            bad("regulation must not be empty".into());
        }
        if let Err(e) = self.validation.check() {
            bad(format!("validation: {e}"));
        }
        if let Err(e) = self.consistency.check() {
            bad(format!("consistency: {e}"));
        }
        let slash = self.consensus.slash_fraction;
        if !(slash > 0.0 && slash <= 1.0) {
            bad(format!("consensus.slash_fraction {slash} outside (0, 1]"));
        }

        let validators = if self.validators.is_empty() {
            bad("at least one validator is required".into());
            None
        } else {
            let vs = self
                .validators
                .iter()
                .map(|v| Validator {
                    id: v.id.clone(),
                    stake: v.stake,
                    honest: v.honest,
                })
                .collect();
            match ValidatorSet::new(vs, self.consensus.threshold_fraction) {
                Ok(set) => Some(set),
                Err(e) => {
                    bad(format!("validators: {e}"));
                    None
                }
            }
        };
        let validator_ids: BTreeSet<&str> = self.validators.iter().map(|v| v.id.as_str()).collect();

        let atlas = match self.resolve_atlas() {
            Ok(a) => Some(a),
            Err(e) => {
                bad(e);
                None
            }
        };

        let mut schedule = GasSchedule::default();
        if let Some(p) = self.gas.gas_price_wei {
            schedule.gas_price_wei = p;
        }
        if let Some(u) = self.gas.token_usd {
            schedule.token_usd = u;
        }
        if let Err(e) = schedule.check() {
            bad(format!("gas: {e}"));
        }

        for (loc, auth) in &self.port_states {
            if loc.is_empty() || auth.is_empty() {
                bad(format!(
                    "port_states: empty location or authority ({loc:?} = {auth:?})"
                ));
            }
        }

        let mut imos = BTreeSet::new();
        for (i, v) in self.vessels.iter().enumerate() {
            let tag = format!("vessels[{i}] ({})", v.imo);
            if ImoNumber::new(v.imo).is_err() {
                bad(format!("{tag}: imo must be a 7-digit number"));
            }
            if !imos.insert(v.imo) {
                bad(format!("{tag}: duplicate imo"));
            }
            if v.owner.is_empty() || v.flag_state.is_empty() {
                bad(format!("{tag}: owner and flag_state are required"));
            }
            check_legs(&mut bad, &tag, "route", v.route.iter().map(|l| l.from_s));
            for leg in &v.route {
                if GeoPosition::new(leg.lat, leg.lon).is_err() {
                    bad(format!(
                        "{tag}: route position ({}, {}) out of range",
                        leg.lat, leg.lon
                    ));
                }
                if leg.location.as_deref() == Some("") {
                    bad(format!("{tag}: empty route location"));
                }
            }
            check_legs(&mut bad, &tag, "fuel", v.fuel.iter().map(|l| l.from_s));
            for leg in &v.fuel {
                if !(leg.sulfur.is_finite() && leg.sulfur >= 0.0) {
                    bad(format!(
                        "{tag}: fuel sulfur {} must be finite and >= 0",
                        leg.sulfur
                    ));
                }
            }
            if v.sensors.is_empty() {
                bad(format!("{tag}: at least one sensor is required"));
            }
            let mut ids = BTreeSet::new();
            for s in &v.sensors {
                if s.id.is_empty() || !ids.insert(s.id.as_str()) {
                    bad(format!("{tag}: sensor id {:?} empty or duplicated", s.id));
                }
                if !(s.noise.is_finite() && s.noise >= 0.0) {
                    bad(format!("{tag}: sensor {:?} noise must be >= 0", s.id));
                }
            }
        }

        for (i, f) in self.faults.iter().enumerate() {
            let tag = format!("faults[{i}]");
            let (from, to) = f.window();
            if from >= to {
                bad(format!("{tag}: empty window [{from}, {to})"));
            }
            let vessel_sensor = |vessel: u64, sensor: Option<&str>| -> Option<String> {
                let Some(v) = self.vessel(vessel) else {
                    return Some(format!("{tag}: unknown vessel {vessel}"));
                };
                match sensor {
                    Some(s) if !v.sensors.iter().any(|x| x.id == s) => {
                        Some(format!("{tag}: vessel {vessel} has no sensor {s:?}"))
                    }
                    _ => None,
                }
            };
            let problem = match f {
                Fault::StuckAt {
                    vessel,
                    sensor,
                    value,
                    ..
                }
                | Fault::OutOfRange {
                    vessel,
                    sensor,
                    value,
                    ..
                } => vessel_sensor(*vessel, Some(sensor)).or_else(|| {
                    (!value.is_finite()).then(|| format!("{tag}: value must be finite"))
                }),
                Fault::OffsetDrift {
                    vessel,
                    sensor,
                    rate_per_hour,
                    ..
                } => vessel_sensor(*vessel, Some(sensor)).or_else(|| {
                    (!rate_per_hour.is_finite()).then(|| format!("{tag}: rate must be finite"))
                }),
                Fault::FuelSwitch { vessel, sulfur, .. } => {
                    vessel_sensor(*vessel, None).or_else(|| {
                        (!(sulfur.is_finite() && *sulfur >= 0.0))
                            .then(|| format!("{tag}: sulfur must be >= 0"))
                    })
                }
                Fault::EcaSpoof { vessel, .. } => vessel_sensor(*vessel, None),
                Fault::DishonestValidator { validator, .. }
                | Fault::CorruptProposer { validator, .. } => (!validator_ids
                    .contains(validator.as_str()))
                .then(|| format!("{tag}: unknown validator {validator:?}")),
            };
            if let Some(p) = problem {
                bad(p);
            }
        }

        match (problems.is_empty(), atlas, validators) {
            (true, Some(atlas), Some(validators)) => Ok(Setup {
                atlas,
                validators,
                schedule,
            }),
            _ => Err(ScenarioError::Invalid(problems)),
        }
    }
}

fn check_legs(
    bad: &mut impl FnMut(String),
    tag: &str,
    what: &str,
    starts: impl Iterator<Item = u64>,
) {
    let starts: Vec<u64> = starts.collect();
    if starts.first() != Some(&0) {
        bad(format!("{tag}: {what} must start with a leg at from_s = 0"));
    }
    if starts.windows(2).any(|w| w[0] >= w[1]) {
        bad(format!(
            "{tag}: {what} legs must have strictly increasing from_s"
        ));
    }
}
