//! Binary compliance evaluation, dispatched by regulation identifier.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geofence::{is_in_eca, EcaAtlas};
use crate::model::{DataPoint, Fixed6, SULFUR_REGULATION};

/// Sulfur cap inside an ECA, in micro-percent.
const ECA_LIMIT: Fixed6 = Fixed6::from_micros(100_000);
/// Global sulfur cap, in micro-percent.
const GLOBAL_LIMIT: Fixed6 = Fixed6::from_micros(500_000);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComplianceError {
    #[error("unknown regulation {0:?}")]
    UnknownRegulation(String),
    #[error("measured value {0} is negative or not finite")]
    BadValue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Area {
    #[serde(rename = "ECA")]
    Eca,
    #[serde(rename = "non-ECA")]
    NonEca,
}

impl Area {
    pub fn from_flag(in_eca: bool) -> Self {
        if in_eca {
            Area::Eca
        } else {
            Area::NonEca
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Area::Eca => "Emissions Control Area",
            Area::NonEca => "Non-ECA",
        }
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceResult {
    /// 1 compliant, 0 non-compliant.
    pub bit: u8,
    pub limit_applied: f64,
    pub area: Area,
    pub message: String,
}

impl ComplianceResult {
    pub fn compliant(&self) -> bool {
        self.bit == 1
    }
}

fn limit_for(in_eca: bool) -> Fixed6 {
    if in_eca {
        ECA_LIMIT
    } else {
        GLOBAL_LIMIT
    }
}

/// Permitted fuel sulfur content in percent: 0.10 inside an ECA, 0.50 outside.
pub fn sulfur_limit(in_eca: bool) -> f64 {
    limit_for(in_eca).to_f64()
}

/// Inclusive comparison against the area's cap, at micro-percent resolution.
pub fn evaluate_sulfur(value: f64, in_eca: bool) -> Result<ComplianceResult, ComplianceError> {
    if !value.is_finite() || value < 0.0 {
        return Err(ComplianceError::BadValue(value));
    }
    let measured = Fixed6::from_f64(value).ok_or(ComplianceError::BadValue(value))?;
    let limit = limit_for(in_eca);
    let ok = measured <= limit;
    let message = match (in_eca, ok) {
        (true, true) => "Compliant - Below 0.10%",
        (true, false) => "Non-compliant - Above 0.10%",
        (false, true) => "Compliant - Below 0.50%",
        (false, false) => "Non-compliant - Above 0.50%",
    };
    Ok(ComplianceResult {
        bit: u8::from(ok),
        limit_applied: limit.to_f64(),
        area: Area::from_flag(in_eca),
        message: message.to_string(),
    })
}

/// A regulation that can judge a validated data point.
pub trait Regulation: Send + Sync {
    fn evaluate(
        &self,
        d: &DataPoint,
        atlas: &EcaAtlas,
    ) -> Result<ComplianceResult, ComplianceError>;
}

/// MARPOL Annex VI Regulation 14: fuel sulfur caps by area.
#[derive(Debug, Default, Clone, Copy)]
pub struct SulfurCap;

impl Regulation for SulfurCap {
    fn evaluate(
        &self,
        d: &DataPoint,
        atlas: &EcaAtlas,
    ) -> Result<ComplianceResult, ComplianceError> {
        let (in_eca, _) = is_in_eca(&d.position, atlas);
        evaluate_sulfur(d.value(), in_eca)
    }
}

/// Regulation identifier → evaluator.
pub struct RegulationRegistry {
    rules: BTreeMap<String, Box<dyn Regulation>>,
}

impl RegulationRegistry {
    pub fn empty() -> Self {
        RegulationRegistry {
            rules: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, id: &str, rule: Box<dyn Regulation>) {
        self.rules.insert(id.to_string(), rule);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rules.contains_key(id)
    }

    pub fn evaluate(
        &self,
        d: &DataPoint,
        atlas: &EcaAtlas,
    ) -> Result<ComplianceResult, ComplianceError> {
        self.rules
            .get(&d.regulation)
            .ok_or_else(|| ComplianceError::UnknownRegulation(d.regulation.clone()))?
            .evaluate(d, atlas)
    }
}

impl Default for RegulationRegistry {
    fn default() -> Self {
        let mut r = RegulationRegistry::empty();
        r.register(SULFUR_REGULATION, Box::new(SulfurCap));
        r
    }
}

impl fmt::Debug for RegulationRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rules.keys()).finish()
    }
}

/// Evaluates `d` against the default registry.
pub fn evaluate(d: &DataPoint, atlas: &EcaAtlas) -> Result<ComplianceResult, ComplianceError> {
    RegulationRegistry::default().evaluate(d, atlas)
}
