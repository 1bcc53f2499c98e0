//! Per-reading validation and pairwise cross-sensor consistency.
//!
//! A reading first goes through [`validate`]. Readings that survive are then
//! compared pairwise against other sensors measuring the same quantity on the
//! same vessel; a pair whose trailing-window agreement score drops below
//! `gamma` is flagged and both of its sensors are held back for that time
//! index (see [`ConsistencyTracker`]).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataPoint, SensorReading};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("window score of an empty window is undefined")]
    EmptyWindow,
    #[error("invalid rules: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationRules {
    pub value_min: f64,
    pub value_max: f64,
    pub calibration_required: bool,
    /// Seconds of tolerated difference between gateway and collector clocks.
    pub max_clock_skew: i64,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules {
            value_min: 0.0,
            value_max: 5.0,
            calibration_required: true,
            max_clock_skew: 300,
        }
    }
}

impl ValidationRules {
    pub fn check(&self) -> Result<(), ValidationError> {
        if !(self.value_min.is_finite() && self.value_max.is_finite()) {
            return Err(ValidationError::Rules("value bounds must be finite".into()));
        }
        if self.value_min > self.value_max {
            return Err(ValidationError::Rules("value_min exceeds value_max".into()));
        }
        if self.max_clock_skew < 0 {
            return Err(ValidationError::Rules("max_clock_skew is negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub window_length: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            epsilon: 0.02,
            gamma: 0.8,
            window_length: 12,
        }
    }
}

impl ConsistencyConfig {
    pub fn check(&self) -> Result<(), ValidationError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(ValidationError::Rules("epsilon must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ValidationError::Rules("gamma must lie in [0, 1]".into()));
        }
        if self.window_length == 0 {
            return Err(ValidationError::Rules("window_length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    OutOfRange,
    CalibrationExpired,
    Malformed,
    StaleClock,
    SuspectSensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub valid: bool,
    pub reason: Reason,
}

impl ValidationVerdict {
    pub const OK: ValidationVerdict = ValidationVerdict {
        valid: true,
        reason: Reason::Ok,
    };

    pub fn invalid(reason: Reason) -> Self {
        debug_assert_ne!(reason, Reason::Ok);
        ValidationVerdict {
            valid: false,
            reason,
        }
    }
}

/// Checks a reading and the data point built from it.
///
/// Failures are reported with the first failing check in the order
/// malformed, out of range, calibration expired, stale clock.
pub fn validate(
    d: &DataPoint,
    r: &SensorReading,
    rules: &ValidationRules,
    now: i64,
) -> ValidationVerdict {
    let malformed = !r.value.is_finite()
        || r.sensor_id.is_empty()
        || d.timestamp != r.time_index
        || d.status.quantity != r.quantity
        || d.regulation.is_empty();
    if malformed {
        return ValidationVerdict::invalid(Reason::Malformed);
    }
    if r.value < rules.value_min || r.value > rules.value_max {
        return ValidationVerdict::invalid(Reason::OutOfRange);
    }
    if rules.calibration_required && r.calibration_expiry < now {
        return ValidationVerdict::invalid(Reason::CalibrationExpired);
    }
    if (r.wall_time - now).abs() > rules.max_clock_skew {
        return ValidationVerdict::invalid(Reason::StaleClock);
    }
    ValidationVerdict::OK
}

/// Agreement bit for two simultaneous readings: inclusive at `epsilon`.
pub fn pair_consistency(r_a: f64, r_b: f64, epsilon: f64) -> u8 {
    u8::from((r_a - r_b).abs() <= epsilon)
}

pub fn window_score(bits: &[u8]) -> Result<f64, ValidationError> {
    if bits.is_empty() {
        return Err(ValidationError::EmptyWindow);
    }
    let ones: usize = bits.iter().map(|&b| usize::from(b != 0)).sum();
    Ok(ones as f64 / bits.len() as f64)
}

/// Strictly below `gamma` is suspect.
pub fn mark_suspect(score: f64, gamma: f64) -> bool {
    score < gamma
}

/// Outcome of one consistency round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsistencyRound {
    /// Pairs (lexicographically ordered) whose window score fell below gamma.
    pub flagged_pairs: Vec<(String, String)>,
    /// Sensors whose readings are withheld at this time index.
    pub excluded: BTreeSet<String>,
}

/// Trailing-window agreement state for every sensor pair in one group
/// (one vessel, one quantity).
///
/// A sensor belonging to a flagged pair is excluded unless it also sits in an
/// unflagged pair whose window is already full, i.e. a third sensor has
/// agreed with it for a whole window.
#[derive(Debug, Clone)]
pub struct ConsistencyTracker {
    config: ConsistencyConfig,
    windows: BTreeMap<(String, String), VecDeque<u8>>,
}

impl ConsistencyTracker {
    pub fn new(config: ConsistencyConfig) -> Self {
        ConsistencyTracker {
            config,
            windows: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ConsistencyConfig {
        &self.config
    }

    /// Bits currently held for a pair, oldest first.
    pub fn window(&self, a: &str, b: &str) -> Option<&VecDeque<u8>> {
        self.windows.get(&ordered(a, b))
    }

    /// Feeds the readings available at one time index (sensor id → value)
    /// and returns which sensors to exclude.
    pub fn observe(&mut self, readings: &BTreeMap<String, f64>) -> ConsistencyRound {
        let ids: Vec<&String> = readings.keys().collect();
        let mut flagged = Vec::new();
        let mut vouched = BTreeSet::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let bit = pair_consistency(readings[*a], readings[*b], self.config.epsilon);
                let window = self.windows.entry(ordered(a, b)).or_default();
                window.push_back(bit);
                while window.len() > self.config.window_length {
                    window.pop_front();
                }
                let bits: Vec<u8> = window.iter().copied().collect();
                // Non-empty: a bit was just pushed.
                let score = window_score(&bits).unwrap_or(0.0);
                if mark_suspect(score, self.config.gamma) {
                    flagged.push(((*a).clone(), (*b).clone()));
                } else if window.len() == self.config.window_length {
                    vouched.insert((*a).clone());
                    vouched.insert((*b).clone());
                }
            }
        }
        let excluded = flagged
            .iter()
            .flat_map(|(a, b)| [a, b])
            .filter(|s| !vouched.contains(*s))
            .cloned()
            .collect();
        ConsistencyRound {
            flagged_pairs: flagged,
            excluded,
        }
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeoPosition, ImoNumber, Quantity, SULFUR_REGULATION};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NOW: i64 = 1_700_000_000;

    fn reading(value: f64) -> SensorReading {
        SensorReading {
            sensor_id: "S1".into(),
            quantity: Quantity::SulfurPct,
            value,
            time_index: 3,
            wall_time: NOW,
            calibration_expiry: NOW + 86_400,
        }
    }

    fn point(r: &SensorReading) -> DataPoint {
        DataPoint::from_reading(
            ImoNumber::new(9074729).unwrap(),
            SULFUR_REGULATION,
            r,
            GeoPosition::new(57.0, 20.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn in_range_reading_is_valid() {
        let r = reading(0.45);
        assert_eq!(
            validate(&point(&r), &r, &ValidationRules::default(), NOW),
            ValidationVerdict::OK
        );
    }

    #[test]
    fn implausible_sulfur_is_out_of_range() {
        let r = reading(7.0);
        let v = validate(&point(&r), &r, &ValidationRules::default(), NOW);
        assert_eq!(v, ValidationVerdict::invalid(Reason::OutOfRange));
        let r = reading(-0.1);
        let v = validate(&point(&r), &r, &ValidationRules::default(), NOW);
        assert_eq!(v.reason, Reason::OutOfRange);
    }

    #[test]
    fn calibration_expiry_boundary() {
        let mut r = reading(0.45);
        r.calibration_expiry = NOW;
        let rules = ValidationRules::default();
        assert!(validate(&point(&r), &r, &rules, NOW).valid);
        r.calibration_expiry = NOW - 1;
        assert_eq!(
            validate(&point(&r), &r, &rules, NOW).reason,
            Reason::CalibrationExpired
        );
        let lax = ValidationRules {
            calibration_required: false,
            ..rules
        };
        assert!(validate(&point(&r), &r, &lax, NOW).valid);
    }

    #[test]
    fn clock_skew_and_reason_priority() {
        let mut r = reading(0.45);
        r.wall_time = NOW - 301;
        assert_eq!(
            validate(&point(&r), &r, &ValidationRules::default(), NOW).reason,
            Reason::StaleClock
        );
        r.wall_time = NOW + 300;
        assert!(validate(&point(&r), &r, &ValidationRules::default(), NOW).valid);
        // Out of range beats expired calibration beats stale clock.
        let mut r = reading(9.0);
        r.calibration_expiry = 0;
        r.wall_time = 0;
        assert_eq!(
            validate(&point(&r), &r, &ValidationRules::default(), NOW).reason,
            Reason::OutOfRange
        );
        let d = point(&reading(0.3));
        r.value = f64::NAN;
        assert_eq!(
            validate(&d, &r, &ValidationRules::default(), NOW).reason,
            Reason::Malformed
        );
    }

    #[test]
    fn mismatched_time_index_is_malformed() {
        let r = reading(0.2);
        let mut d = point(&r);
        d.timestamp += 1;
        assert_eq!(
            validate(&d, &r, &ValidationRules::default(), NOW).reason,
            Reason::Malformed
        );
    }

    #[test]
    fn pair_consistency_cases() {
        assert_eq!(pair_consistency(0.3, 0.3, 0.0), 1);
        assert_eq!(pair_consistency(0.5, 0.25, 0.25), 1);
        assert_eq!(pair_consistency(0.10, 0.30, 0.05), 0);
    }

    #[test]
    fn window_score_cases() {
        assert_eq!(window_score(&[1; 10]).unwrap(), 1.0);
        assert_eq!(window_score(&[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(window_score(&[]), Err(ValidationError::EmptyWindow));
    }

    #[test]
    fn window_score_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.gen_range(1..64);
            let bits: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let mut sum = 0u32;
            for b in &bits {
                if *b == 1 {
                    sum += 1;
                }
            }
            let expected = f64::from(sum) / f64::from(len as u32);
            assert_eq!(window_score(&bits).unwrap(), expected);
        }
    }

    #[test]
    fn suspect_threshold_is_strict() {
        assert!(!mark_suspect(1.0, 0.8));
        assert!(mark_suspect(0.5, 0.8));
        assert!(!mark_suspect(0.8, 0.8));
    }

    #[test]
    fn config_checks() {
        assert!(ConsistencyConfig::default().check().is_ok());
        let bad = ConsistencyConfig {
            gamma: 1.5,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        let bad = ValidationRules {
            value_min: 2.0,
            value_max: 1.0,
            ..Default::default()
        };
        assert!(bad.check().is_err());
    }

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn disagreeing_pair_is_excluded_together() {
        let mut t = ConsistencyTracker::new(ConsistencyConfig::default());
        let round = t.observe(&map(&[("a", 0.10), ("b", 0.40)]));
        assert_eq!(round.flagged_pairs, vec![("a".into(), "b".into())]);
        assert_eq!(
            round.excluded,
            ["a", "b"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn full_concordant_window_rehabilitates() {
        let cfg = ConsistencyConfig {
            window_length: 3,
            ..Default::default()
        };
        let mut t = ConsistencyTracker::new(cfg);
        for _ in 0..3 {
            let r = t.observe(&map(&[("a", 0.1), ("b", 0.1), ("c", 0.1)]));
            assert!(r.excluded.is_empty());
        }
        // b drifts: (a,b) and (b,c) eventually flagged, a and c vouch for each other.
        let mut last = ConsistencyRound::default();
        for _ in 0..3 {
            last = t.observe(&map(&[("a", 0.1), ("b", 0.9), ("c", 0.1)]));
        }
        assert_eq!(last.flagged_pairs.len(), 2);
        assert_eq!(last.excluded, ["b"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn window_is_bounded() {
        let cfg = ConsistencyConfig {
            window_length: 4,
            ..Default::default()
        };
        let mut t = ConsistencyTracker::new(cfg);
        for _ in 0..10 {
            t.observe(&map(&[("x", 0.1), ("y", 0.1)]));
        }
        assert_eq!(t.window("y", "x").unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn score_is_permutation_invariant(mut bits in proptest::collection::vec(0u8..=1, 1..50), seed in any::<u64>()) {
            let before = window_score(&bits).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..bits.len()).rev() {
                let j = rng.gen_range(0..=i);
                bits.swap(i, j);
            }
            prop_assert_eq!(window_score(&bits).unwrap(), before);
        }

        #[test]
        fn consistency_monotone_in_epsilon(a in 0.0f64..5.0, b in 0.0f64..5.0, e in 0.0f64..1.0, extra in 0.0f64..1.0) {
            prop_assert!(pair_consistency(a, b, e + extra) >= pair_consistency(a, b, e));
        }

        #[test]
        fn exclusion_only_touches_flagged_pairs(values in proptest::collection::vec(0.0f64..1.0, 2..6), rounds in 1usize..20) {
            let mut t = ConsistencyTracker::new(ConsistencyConfig { window_length: 4, ..Default::default() });
            let readings: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)).collect();
            for _ in 0..rounds {
                let round = t.observe(&readings);
                let in_flagged: BTreeSet<String> = round.flagged_pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
                prop_assert!(round.excluded.is_subset(&in_flagged));
            }
        }
    }
}
