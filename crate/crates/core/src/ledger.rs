//! Hash-linked, append-only chain of committed `(digest, compliance bit)`
//! entries, with newline-delimited JSON persistence.
//!
//! `block_hash` commits to height, parent hash, proposer and entries. Votes are
//! collected on that hash, so the approvals are covered by a second digest,
//! `seal = SHA-256(block_hash ‖ approvals)`, which [`verify_chain`] also checks.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::consensus::VoteRecord;
use crate::model::{Digest, ImoNumber};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("cannot assemble a block from an empty pending set")]
    EmptyBlock,
    #[error("candidate height {got} does not follow tip height {tip}")]
    Height { tip: u64, got: u64 },
    #[error("candidate prev_hash {got} does not match tip hash {expected}")]
    Linkage { expected: Digest, got: Digest },
    #[error("candidate block_hash does not match its contents")]
    HashMismatch,
    #[error("vote record is for a different block")]
    WrongVote,
    #[error("block was not approved by the required stake")]
    NotApproved,
    #[error("compliance id {0} already on chain")]
    DuplicateId(ComplianceId),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("line {line}: record is not in canonical form")]
    NonCanonical { line: usize },
    #[error("line {line}: existing ledger file diverges from the chain being persisted")]
    Diverged { line: usize },
}

/// 128-bit identifier attached to each committed data point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComplianceId(u128);

impl ComplianceId {
    pub fn from_u128(v: u128) -> Self {
        ComplianceId(v)
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 32 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        u128::from_str_radix(s, 16).ok().map(ComplianceId)
    }
}

impl fmt::Display for ComplianceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ComplianceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComplianceId({})", self.to_hex())
    }
}

impl Serialize for ComplianceId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ComplianceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ComplianceId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad compliance id"))
    }
}

/// Draws 128 fresh bits from `rng`.
pub fn generate_compliance_id<R: RngCore + ?Sized>(rng: &mut R) -> ComplianceId {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    ComplianceId(u128::from_be_bytes(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub compliance_id: ComplianceId,
    pub digest: Digest,
    pub compliance_bit: u8,
    pub vessel_imo: ImoNumber,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Approval {
    pub validator_id: String,
    pub stake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub entries: Vec<LedgerEntry>,
    pub proposer_id: Option<String>,
    pub approvals: Vec<Approval>,
    pub block_hash: Digest,
    pub seal: Digest,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_be_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Block {
    pub fn genesis() -> Self {
        let mut b = Block {
            height: 0,
            prev_hash: Digest::ZERO,
            entries: Vec::new(),
            proposer_id: None,
            approvals: Vec::new(),
            block_hash: Digest::ZERO,
            seal: Digest::ZERO,
        };
        b.block_hash = b.compute_hash();
        b.seal = b.compute_seal();
        b
    }

    /// SHA-256 over the length-prefixed binary encoding of
    /// `(height, prev_hash, proposer_id, entries)`.
    pub fn compute_hash(&self) -> Digest {
        let mut buf = Vec::with_capacity(64 + self.entries.len() * 61);
        buf.extend_from_slice(b"ecaledger/block/v1");
        buf.extend_from_slice(&self.height.to_be_bytes());
        buf.extend_from_slice(self.prev_hash.as_bytes());
        match &self.proposer_id {
            Some(p) => {
                buf.push(1);
                put_str(&mut buf, p);
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&e.compliance_id.as_u128().to_be_bytes());
            buf.extend_from_slice(e.digest.as_bytes());
            buf.push(e.compliance_bit);
            buf.extend_from_slice(&e.vessel_imo.get().to_be_bytes());
            buf.extend_from_slice(&e.timestamp.to_be_bytes());
        }
        Digest::of(&buf)
    }

    pub fn compute_seal(&self) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.block_hash.as_bytes());
        buf.extend_from_slice(&(self.approvals.len() as u32).to_be_bytes());
        for a in &self.approvals {
            put_str(&mut buf, &a.validator_id);
            buf.extend_from_slice(&a.stake.to_bits().to_be_bytes());
        }
        Digest::of(&buf)
    }

    pub fn compliant_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.compliance_bit == 1)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    blocks: Vec<Block>,
    ids: HashSet<ComplianceId>,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new()
    }
}

impl Chain {
    /// A chain holding only the genesis block.
    pub fn new() -> Self {
        Chain {
            blocks: vec![Block::genesis()],
            ids: HashSet::new(),
        }
    }

    /// Wraps blocks as-is, without checking any invariant. Use
    /// [`verify_chain`] to audit the result.
    pub fn from_blocks_unchecked(blocks: Vec<Block>) -> Self {
        let ids = blocks
            .iter()
            .flat_map(|b| b.entries.iter().map(|e| e.compliance_id))
            .collect();
        Chain { blocks, ids }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn contains_id(&self, id: ComplianceId) -> bool {
        self.ids.contains(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Block, &LedgerEntry)> {
        self.blocks
            .iter()
            .flat_map(|b| b.entries.iter().map(move |e| (b, e)))
    }

    /// Checks that `block` would extend this chain: height, linkage, hash and
    /// id uniqueness. Does not look at votes.
    pub fn check_candidate(&self, block: &Block) -> Result<(), LedgerError> {
        let tip = self.tip();
        if block.height != tip.height + 1 {
            return Err(LedgerError::Height {
                tip: tip.height,
                got: block.height,
            });
        }
        if block.prev_hash != tip.block_hash {
            return Err(LedgerError::Linkage {
                expected: tip.block_hash,
                got: block.prev_hash,
            });
        }
        if block.compute_hash() != block.block_hash {
            return Err(LedgerError::HashMismatch);
        }
        let mut seen = HashSet::new();
        for e in &block.entries {
            if self.ids.contains(&e.compliance_id) || !seen.insert(e.compliance_id) {
                return Err(LedgerError::DuplicateId(e.compliance_id));
            }
        }
        Ok(())
    }

    /// Appends an approved candidate, recording its approvals. On any error
    /// the chain is left untouched.
    pub fn append(&mut self, mut block: Block, record: &VoteRecord) -> Result<(), LedgerError> {
        if record.block_hash != block.block_hash {
            return Err(LedgerError::WrongVote);
        }
        if !record.approved {
            return Err(LedgerError::NotApproved);
        }
        self.check_candidate(&block)?;
        block.approvals = record.approvals.clone();
        block.seal = block.compute_seal();
        self.ids
            .extend(block.entries.iter().map(|e| e.compliance_id));
        self.blocks.push(block);
        Ok(())
    }

    /// One canonical JSON line per block, newline-terminated.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&block_line(b));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, LoadError> {
        Self::from_ndjson_bytes(text.as_bytes())
    }

    /// Like [`Chain::from_ndjson`], but bytes that are not UTF-8 are reported
    /// against the line holding them rather than failing the whole file.
    pub fn from_ndjson_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let mut blocks = Vec::new();
        let lines: Vec<&[u8]> = bytes.split_inclusive(|b| *b == b'\n').collect();
        if lines.is_empty() {
            return Err(LoadError::Corrupt {
                line: 1,
                message: "missing genesis record".into(),
            });
        }
        for (i, raw) in lines.iter().enumerate() {
            let line = i + 1;
            let Some(body) = raw.strip_suffix(b"\n") else {
                return Err(LoadError::Corrupt {
                    line,
                    message: "truncated record (no line terminator)".into(),
                });
            };
            let body = std::str::from_utf8(body).map_err(|e| LoadError::Corrupt {
                line,
                message: format!("not UTF-8: {e}"),
            })?;
            let block: Block = serde_json::from_str(body).map_err(|e| LoadError::Corrupt {
                line,
                message: e.to_string(),
            })?;
            if block.entries.iter().any(|e| e.compliance_bit > 1) {
                return Err(LoadError::Corrupt {
                    line,
                    message: "compliance bit must be 0 or 1".into(),
                });
            }
            if block_line(&block) != body {
                return Err(LoadError::NonCanonical { line });
            }
            blocks.push(block);
        }
        Ok(Chain::from_blocks_unchecked(blocks))
    }
}

fn block_line(b: &Block) -> String {
    serde_json::to_string(b).expect("block serializes")
}

/// Assembles the next candidate block on top of `chain`. Compliant and
/// non-compliant entries are carried alike.
pub fn assemble_block(
    pending: &[LedgerEntry],
    proposer: &str,
    chain: &Chain,
) -> Result<Block, LedgerError> {
    if pending.is_empty() {
        return Err(LedgerError::EmptyBlock);
    }
    let tip = chain.tip();
    let mut block = Block {
        height: tip.height + 1,
        prev_hash: tip.block_hash,
        entries: pending.to_vec(),
        proposer_id: Some(proposer.to_string()),
        approvals: Vec::new(),
        block_hash: Digest::ZERO,
        seal: Digest::ZERO,
    };
    block.block_hash = block.compute_hash();
    block.seal = block.compute_seal();
    Ok(block)
}

/// Recomputes every hash, seal and link. Returns the lowest failing height.
pub fn verify_chain(chain: &Chain) -> Result<(), u64> {
    let mut ids = HashSet::new();
    let mut prev: Option<&Block> = None;
    for (i, b) in chain.blocks().iter().enumerate() {
        let expected_height = i as u64;
        let bad = match prev {
            None => {
                b.height != 0
                    || b.prev_hash != Digest::ZERO
                    || !b.entries.is_empty()
                    || b.proposer_id.is_some()
                    || !b.approvals.is_empty()
            }
            Some(p) => {
                b.height != expected_height
                    || b.prev_hash != p.block_hash
                    || b.proposer_id.is_none()
            }
        } || b.compute_hash() != b.block_hash
            || b.compute_seal() != b.seal
            || b.entries
                .iter()
                .any(|e| e.compliance_bit > 1 || !ids.insert(e.compliance_id));
        if bad {
            return Err(expected_height);
        }
        prev = Some(b);
    }
    if chain.blocks().is_empty() {
        return Err(0);
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> LoadError {
    LoadError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the chain to `path`. An existing file must be a prefix of the chain;
/// only the missing records are appended.
pub fn persist(chain: &Chain, path: &Path) -> Result<(), LoadError> {
    let lines: Vec<String> = chain.blocks().iter().map(block_line).collect();
    let existing = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut have = 0usize;
    for (i, raw) in existing.split_inclusive('\n').enumerate() {
        let matches = raw
            .strip_suffix('\n')
            .is_some_and(|body| lines.get(i).is_some_and(|l| l == body));
        if !matches {
            return Err(LoadError::Diverged { line: i + 1 });
        }
        have = i + 1;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut tail = String::new();
    for l in &lines[have..] {
        tail.push_str(l);
        tail.push('\n');
    }
    file.write_all(tail.as_bytes())
        .map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Chain, LoadError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Chain::from_ndjson_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::VoteRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(rng: &mut ChaCha8Rng, bit: u8) -> LedgerEntry {
        LedgerEntry {
            compliance_id: generate_compliance_id(rng),
            digest: Digest::of(&rng.gen::<[u8; 8]>()),
            compliance_bit: bit,
            vessel_imo: ImoNumber::new(9074729).unwrap(),
            timestamp: rng.gen_range(0..100),
        }
    }

    fn approve(block: &Block) -> VoteRecord {
        VoteRecord {
            block_hash: block.block_hash,
            approvals: vec![Approval {
                validator_id: "v1".into(),
                stake: 1.0,
            }],
            approving_stake: 1.0,
            total_stake: 1.0,
            approved: true,
        }
    }

    pub(crate) fn build_chain(blocks: usize, per_block: usize, seed: u64) -> Chain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chain = Chain::new();
        for _ in 0..blocks {
            let entries: Vec<_> = (0..per_block)
                .map(|i| entry(&mut rng, (i % 2) as u8))
                .collect();
            let b = assemble_block(&entries, "v1", &chain).unwrap();
            let vote = approve(&b);
            chain.append(b, &vote).unwrap();
        }
        chain
    }

    #[test]
    fn ids_are_seed_deterministic() {
        let a = generate_compliance_id(&mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_compliance_id(&mut ChaCha8Rng::seed_from_u64(5));
        let c = generate_compliance_id(&mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(ComplianceId::from_hex(&a.to_hex()), Some(a));
    }

    #[test]
    fn million_ids_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut seen = HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            assert!(seen.insert(generate_compliance_id(&mut rng)));
        }
    }

    #[test]
    fn first_block_follows_genesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = Chain::new();
        let entries: Vec<_> = [1, 0, 1].iter().map(|b| entry(&mut rng, *b)).collect();
        let b = assemble_block(&entries, "v1", &chain).unwrap();
        assert_eq!(b.height, 1);
        assert_eq!(b.prev_hash, chain.tip().block_hash);
        assert_eq!(b.entries, entries);
        assert_eq!(b.compliant_count(), 2);
        assert_eq!(b.compute_hash(), b.block_hash);
        assert_eq!(
            assemble_block(&[], "v1", &chain),
            Err(LedgerError::EmptyBlock)
        );
    }

    #[test]
    fn append_checks_linkage_and_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut chain = Chain::new();
        let stale = assemble_block(&[entry(&mut rng, 1)], "v1", &chain).unwrap();
        let b = assemble_block(&[entry(&mut rng, 1)], "v1", &chain).unwrap();
        chain.append(b.clone(), &approve(&b)).unwrap();
        assert_eq!(chain.height(), 1);

        let before = chain.clone();
        // Built on genesis, so its height and parent no longer fit.
        assert!(chain.append(stale.clone(), &approve(&stale)).is_err());
        let mut relinked = stale.clone();
        relinked.height = 2;
        relinked.block_hash = relinked.compute_hash();
        assert!(matches!(
            chain.append(relinked.clone(), &approve(&relinked)),
            Err(LedgerError::Linkage { .. })
        ));
        let next = assemble_block(&[entry(&mut rng, 0)], "v1", &chain).unwrap();
        let mut rejected = approve(&next);
        rejected.approved = false;
        assert_eq!(
            chain.append(next.clone(), &rejected),
            Err(LedgerError::NotApproved)
        );
        assert_eq!(chain, before);

        let dup = assemble_block(&b.entries, "v1", &chain).unwrap();
        assert!(matches!(
            chain.append(dup.clone(), &approve(&dup)),
            Err(LedgerError::DuplicateId(_))
        ));
        assert_eq!(chain, before);
    }

    #[test]
    fn verify_localizes_tampering() {
        let chain = build_chain(50, 5, 9);
        assert_eq!(verify_chain(&chain), Ok(()));
        let mut blocks = chain.clone().into_blocks();
        blocks[7].entries[3].compliance_bit ^= 1;
        assert_eq!(verify_chain(&Chain::from_blocks_unchecked(blocks)), Err(7));

        let mut blocks = chain.clone().into_blocks();
        blocks[12].approvals[0].stake = 2.0;
        assert_eq!(verify_chain(&Chain::from_blocks_unchecked(blocks)), Err(12));

        let mut blocks = chain.into_blocks();
        blocks.remove(20);
        assert_eq!(verify_chain(&Chain::from_blocks_unchecked(blocks)), Err(20));
    }

    #[test]
    fn random_byte_mutations_never_verify() {
        let chain = build_chain(50, 3, 4);
        let text = chain.to_ndjson();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let mut bytes = text.clone().into_bytes();
            let at = rng.gen_range(0..bytes.len());
            let old = bytes[at];
            let mut new = rng.gen::<u8>();
            while new == old {
                new = rng.gen();
            }
            bytes[at] = new;
            // The newline ending a record belongs to that record.
            let height = text.as_bytes()[..at]
                .iter()
                .filter(|b| **b == b'\n')
                .count() as u64;
            let found = match Chain::from_ndjson_bytes(&bytes) {
                Ok(c) => verify_chain(&c).expect_err("mutation went unnoticed"),
                Err(LoadError::Corrupt { line, .. } | LoadError::NonCanonical { line }) => {
                    line as u64 - 1
                }
                Err(e) => panic!("unexpected {e}"),
            };
            assert_eq!(found, height, "mutation at byte {at}");
        }
    }

    #[test]
    fn persist_round_trip_and_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        persist(&Chain::new(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), Chain::new());

        let chain = build_chain(100, 4, 11);
        persist(&chain, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, chain);
        assert_eq!(verify_chain(&loaded), Ok(()));
        assert_eq!(fs::read_to_string(&path).unwrap(), chain.to_ndjson());

        // Persisting a different history over it is refused.
        let other = build_chain(3, 4, 12);
        assert!(matches!(
            persist(&other, &path),
            Err(LoadError::Diverged { line: 2 })
        ));
    }

    #[test]
    fn persist_extends_by_appending() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut chain = Chain::new();
        persist(&chain, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let b = assemble_block(&[entry(&mut rng, 1)], "v1", &chain).unwrap();
        let v = approve(&b);
        chain.append(b, &v).unwrap();
        persist(&chain, &path).unwrap();
        let second = fs::read(&path).unwrap();
        assert!(second.starts_with(&first));
        assert_eq!(load(&path).unwrap(), chain);
    }

    #[test]
    fn truncated_last_line_names_it() {
        let chain = build_chain(5, 2, 13);
        let text = chain.to_ndjson();
        let cut = &text[..text.len() - 20];
        match Chain::from_ndjson(cut) {
            Err(LoadError::Corrupt { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Chain::from_ndjson(""),
            Err(LoadError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn non_canonical_number_is_rejected() {
        let chain = build_chain(2, 1, 14);
        let text = chain
            .to_ndjson()
            .replacen("\"stake\":1.0", "\"stake\":1e0", 1);
        assert!(matches!(
            Chain::from_ndjson(&text),
            Err(LoadError::NonCanonical { line: 2 })
        ));
    }

    #[test]
    fn chain_moves_between_threads() {
        let chain = build_chain(10, 2, 15);
        let handle = std::thread::spawn(move || verify_chain(&chain).map(|_| chain.len()));
        assert_eq!(handle.join().unwrap(), Ok(11));
    }
}
