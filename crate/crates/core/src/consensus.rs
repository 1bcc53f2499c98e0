//! Stake-weighted proposer selection, stake-threshold voting and slashing.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{Approval, Block, Chain, LedgerEntry, LedgerError};
use crate::model::Digest;

pub const DEFAULT_THRESHOLD: f64 = 2.0 / 3.0;
pub const DEFAULT_SLASH_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("total stake is zero")]
    NoStake,
    #[error("unknown validator {0:?}")]
    UnknownValidator(String),
    #[error("slash fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("invalid validator set: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validator {
    pub id: String,
    pub stake: f64,
    pub honest: bool,
}

impl Validator {
    pub fn new(id: &str, stake: f64) -> Self {
        Validator {
            id: id.to_string(),
            stake,
            honest: true,
        }
    }

    pub fn dishonest(mut self) -> Self {
        self.honest = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorSet {
    validators: Vec<Validator>,
    threshold_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub block_hash: Digest,
    pub approvals: Vec<Approval>,
    pub approving_stake: f64,
    pub total_stake: f64,
    pub approved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlashEvent {
    pub validator_id: String,
    pub stake_before: f64,
    pub stake_after: f64,
}

/// Why a candidate failed local verification.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateFault {
    Chain(LedgerError),
    /// Entries differ from the transactions the proposer was expected to bundle.
    Entries,
}

/// Local verification every honest validator performs: the block extends the
/// chain and carries exactly the leading pending entries.
pub fn verify_candidate(
    block: &Block,
    chain: &Chain,
    pending: &[LedgerEntry],
) -> Result<(), CandidateFault> {
    chain
        .check_candidate(block)
        .map_err(CandidateFault::Chain)?;
    let n = block.entries.len();
    if n == 0 || n > pending.len() || block.entries[..] != pending[..n] {
        return Err(CandidateFault::Entries);
    }
    Ok(())
}

impl ValidatorSet {
    pub fn new(
        validators: Vec<Validator>,
        threshold_fraction: f64,
    ) -> Result<Self, ConsensusError> {
        let set = ValidatorSet {
            validators,
            threshold_fraction,
        };
        set.check()?;
        Ok(set)
    }

    pub fn check(&self) -> Result<(), ConsensusError> {
        if !(self.threshold_fraction > 0.5 && self.threshold_fraction <= 1.0) {
            return Err(ConsensusError::Invalid(format!(
                "threshold_fraction {} outside (0.5, 1]",
                self.threshold_fraction
            )));
        }
        let mut ids = BTreeSet::new();
        for v in &self.validators {
            if !(v.stake.is_finite() && v.stake >= 0.0) {
                return Err(ConsensusError::Invalid(format!(
                    "validator {:?} has bad stake",
                    v.id
                )));
            }
            if !ids.insert(v.id.as_str()) {
                return Err(ConsensusError::Invalid(format!(
                    "duplicate validator id {:?}",
                    v.id
                )));
            }
        }
        if self.total_stake() <= 0.0 {
            return Err(ConsensusError::NoStake);
        }
        Ok(())
    }

    pub fn validators(&self) -> &[Validator] {
        &self.validators
    }

    pub fn threshold_fraction(&self) -> f64 {
        self.threshold_fraction
    }

    pub fn get(&self, id: &str) -> Option<&Validator> {
        self.validators.iter().find(|v| v.id == id)
    }

    pub fn set_honest(&mut self, id: &str, honest: bool) -> Result<(), ConsensusError> {
        let v = self
            .validators
            .iter_mut()
            .find(|v| v.id == id)
            .ok_or_else(|| ConsensusError::UnknownValidator(id.to_string()))?;
        v.honest = honest;
        Ok(())
    }

    pub fn total_stake(&self) -> f64 {
        self.validators.iter().map(|v| v.stake).sum()
    }

    /// Selection probability of each validator, `stake / total`.
    pub fn probabilities(&self) -> Result<Vec<f64>, ConsensusError> {
        let total = self.total_stake();
        if total <= 0.0 {
            return Err(ConsensusError::NoStake);
        }
        Ok(self.validators.iter().map(|v| v.stake / total).collect())
    }

    /// Inverse-CDF draw over the cumulative stake vector using one uniform
    /// sample. Zero-stake validators are never chosen.
    pub fn select_proposer<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<&Validator, ConsensusError> {
        let total = self.total_stake();
        if total <= 0.0 {
            return Err(ConsensusError::NoStake);
        }
        let target = rng.gen::<f64>() * total;
        let mut cumulative = 0.0;
        let mut last_positive = None;
        for v in &self.validators {
            if v.stake <= 0.0 {
                continue;
            }
            cumulative += v.stake;
            last_positive = Some(v);
            if target < cumulative {
                return Ok(v);
            }
        }
        // Rounding can leave target at the very top of the range.
        last_positive.ok_or(ConsensusError::NoStake)
    }

    /// Every validator votes on `block`. Honest validators approve iff the
    /// candidate passes [`verify_candidate`]; dishonest ones invert that.
    pub fn vote(&self, block: &Block, chain: &Chain, pending: &[LedgerEntry]) -> VoteRecord {
        let valid = verify_candidate(block, chain, pending).is_ok();
        let approvals: Vec<Approval> = self
            .validators
            .iter()
            .filter(|v| v.honest == valid)
            .map(|v| Approval {
                validator_id: v.id.clone(),
                stake: v.stake,
            })
            .collect();
        let approving_stake: f64 = approvals.iter().map(|a| a.stake).sum();
        let total_stake = self.total_stake();
        VoteRecord {
            block_hash: block.block_hash,
            approved: approving_stake >= self.threshold_fraction * total_stake,
            approvals,
            approving_stake,
            total_stake,
        }
    }

    /// Multiplies the validator's stake by `1 - fraction`.
    pub fn slash(
        &mut self,
        validator_id: &str,
        fraction: f64,
    ) -> Result<SlashEvent, ConsensusError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ConsensusError::BadFraction(fraction));
        }
        let v = self
            .validators
            .iter_mut()
            .find(|v| v.id == validator_id)
            .ok_or_else(|| ConsensusError::UnknownValidator(validator_id.to_string()))?;
        let before = v.stake;
        v.stake = (before * (1.0 - fraction)).max(0.0);
        Ok(SlashEvent {
            validator_id: v.id.clone(),
            stake_before: before,
            stake_after: v.stake,
        })
    }

    /// Slashes the proposer and every approver of a block that failed
    /// independent verification. Valid blocks slash no one.
    pub fn detect_and_slash(
        &mut self,
        record: &VoteRecord,
        block: &Block,
        verification: &Result<(), CandidateFault>,
        fraction: f64,
    ) -> Vec<SlashEvent> {
        if verification.is_ok() {
            return Vec::new();
        }
        let mut culprits: Vec<&str> = Vec::new();
        if let Some(p) = block.proposer_id.as_deref() {
            culprits.push(p);
        }
        for a in &record.approvals {
            if !culprits.contains(&a.validator_id.as_str()) {
                culprits.push(&a.validator_id);
            }
        }
        let culprits: Vec<String> = culprits.into_iter().map(str::to_string).collect();
        culprits
            .iter()
            .filter_map(|id| self.slash(id, fraction).ok())
            .collect()
    }
}
