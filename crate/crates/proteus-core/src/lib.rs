//! Core of the Proteus committee-based BFT consensus protocol.
//!
//! Proteus elects a small root committee of c replicas out of n to run a
//! customized BFT round per block; the remaining replicas validate and
//! approve the committee's proposals, and a failed committee is replaced
//! wholesale by a view change. This crate provides:
//!
//! - domain types: blocks, chains, signed messages, quorum certificates
//! - committee mathematics: exact failure probabilities and seeded selection
//! - the replica state machines for normal mode and view change, expressed
//!   as pure step functions from (state, event) to outputs
//! - a Byzantine strategy catalog applied as wrappers around honest outputs
//! - a minimal PBFT normal-case state machine used as a baseline

pub mod adversary;
pub mod auth;
pub mod chain;
pub mod committee;
pub mod message;
pub mod pbft;
pub mod quorum;
pub mod replica;
pub mod types;
mod view_change;

#[cfg(test)]
pub(crate) mod testutil;

pub use auth::{Authenticator, KeyedDigestAuth, SharedAuthenticator, Signature};
pub use chain::{Chain, ChainError};
pub use committee::{
    committee_draw_probability, default_f, failure_probability, min_committee_size,
    select_committee, CommitteeError, CommitteeParams, CommitteeSelection, FailureProbability,
};
pub use message::{MessageBody, MessageKind, Proof, SignedMessage};
pub use quorum::{
    aggregate_quorum_cert, global_quorum_threshold, root_quorum_threshold, verify_quorum_cert,
    QuorumCertificate, QuorumError, ThresholdKind,
};
pub use types::{digest_of, Block, Digest, ReplicaId, Transaction};
