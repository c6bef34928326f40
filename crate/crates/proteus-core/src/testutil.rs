//! Shared fixtures for in-crate tests.

use crate::auth::{Authenticator, KeyedDigestAuth, SharedAuthenticator};
use crate::committee::CommitteeSelection;
use crate::message::{MessageBody, SignedMessage};
use crate::quorum::{aggregate_quorum_cert, QuorumCertificate, ThresholdKind};
use crate::replica::{Replica, ReplicaConfig};
use crate::types::{Block, Digest, ReplicaId, Transaction};

pub const SEED: &[u8] = b"replica-tests";

pub fn cluster(n: u32, c: u32) -> (Vec<Replica>, SharedAuthenticator) {
    let auth = KeyedDigestAuth::shared(SEED, n);
    let cfg = ReplicaConfig {
        n,
        f: (n - 1) / 3,
        c,
        committee_seed: SEED.to_vec(),
        epoch_timeout: 40,
        block_timeout: 20,
    };
    let replicas = (0..n)
        .map(|i| Replica::new(ReplicaId(i), cfg.clone(), auth.clone()))
        .collect();
    (replicas, auth)
}

pub fn txs(n: usize) -> Vec<Transaction> {
    (0..n).map(|i| Transaction(vec![i as u8 + 1])).collect()
}

pub fn vote(
    auth: &dyn Authenticator,
    id: ReplicaId,
    view: u64,
    seq: u64,
    digest: Digest,
    body: MessageBody,
) -> SignedMessage {
    SignedMessage::sign(auth, id, view, seq, digest, body)
}

/// Root-quorum commit certificate over `block` signed by the first `count`
/// committee members.
pub fn root_cert(
    auth: &dyn Authenticator,
    committee: &CommitteeSelection,
    block: &Block,
    f: u32,
    c: u32,
    count: usize,
) -> QuorumCertificate {
    let votes: Vec<SignedMessage> = committee.members[..count]
        .iter()
        .map(|&m| {
            vote(
                auth,
                m,
                block.view,
                block.seq,
                block.digest,
                MessageBody::Commit,
            )
        })
        .collect();
    aggregate_quorum_cert(&votes, ThresholdKind::RootQuorum, committee, f, c, auth).unwrap()
}

pub fn global_cert(
    auth: &dyn Authenticator,
    committee: &CommitteeSelection,
    block: &Block,
    f: u32,
    c: u32,
    signers: &[u32],
) -> QuorumCertificate {
    let votes: Vec<SignedMessage> = signers
        .iter()
        .map(|&i| {
            vote(
                auth,
                ReplicaId(i),
                block.view,
                block.seq,
                block.digest,
                MessageBody::Approval,
            )
        })
        .collect();
    aggregate_quorum_cert(&votes, ThresholdKind::GlobalQuorum, committee, f, c, auth).unwrap()
}
