//! Sulfur emission compliance monitoring on a simulated stake-weighted ledger.
//!
//! Sensor readings are validated and cross-checked, hashed, judged against the
//! MARPOL Annex VI sulfur caps, and committed to a hash-linked chain whose
//! blocks are proposed and voted on by a proof-of-stake validator set. Contract
//! state machines mirror vessel registration, emission recording and
//! non-compliance notification, with per-call gas accounting.

pub mod compliance;
pub mod consensus;
pub mod contracts;
pub mod costs;
pub mod geofence;
pub mod ledger;
pub mod model;
pub mod scenario;
pub mod simnet;
pub mod validation;
