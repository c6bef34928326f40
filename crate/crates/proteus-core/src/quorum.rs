//! Quorum certificates: aggregation and verification of vote signatures
//! against the two protocol thresholds.
//!
//! A root quorum needs floor(2c/3)+1 distinct committee signers; a global
//! quorum needs 2f+1 distinct signers drawn from all replicas, mixing
//! committee commit signatures with regular-replica approvals.

use serde::Serialize;
use thiserror::Error;

use crate::auth::{Authenticator, Signature};
use crate::committee::CommitteeSelection;
use crate::message::{vote_signing_bytes, MessageKind, SignedMessage};
use crate::types::{wire, Digest, ReplicaId};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum ThresholdKind {
    RootQuorum,
    GlobalQuorum,
}

/// Root-committee quorum: floor(2c/3) + 1 distinct members.
pub fn root_quorum_threshold(c: u32) -> usize {
    (2 * c as usize) / 3 + 1
}

/// Global quorum: 2f + 1 distinct replicas.
pub fn global_quorum_threshold(f: u32) -> usize {
    2 * f as usize + 1
}

/// A signature by `signer` over the vote (kind, view, seq, digest). The kind
/// is retained because global quorums mix commit and approval votes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CertVote {
    pub signer: ReplicaId,
    pub kind: MessageKind,
    pub signature: Signature,
}

/// Digest plus the distinct signers and signatures that endorse it at a
/// claimed threshold kind.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct QuorumCertificate {
    pub kind: ThresholdKind,
    pub view: u64,
    pub seq: u64,
    pub digest: Digest,
    /// Sorted by signer id, one entry per signer.
    pub votes: Vec<CertVote>,
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum QuorumError {
    #[error("insufficient votes: {got} distinct signers, threshold {need}")]
    InsufficientVotes { got: usize, need: usize },
    #[error("votes disagree on (view, seq, digest)")]
    MixedDigests,
    #[error("vote from {0:?} fails signature verification")]
    BadSignature(ReplicaId),
}

impl QuorumCertificate {
    pub fn signers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.votes.iter().map(|v| v.signer)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        wire::put_u8(
            out,
            match self.kind {
                ThresholdKind::RootQuorum => 1,
                ThresholdKind::GlobalQuorum => 2,
            },
        );
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_digest(out, &self.digest);
        wire::put_u64(out, self.votes.len() as u64);
        for v in &self.votes {
            wire::put_u32(out, v.signer.0);
            wire::put_u8(out, v.kind.tag());
            out.extend_from_slice(&v.signature.0);
        }
    }

    /// Finds a signer present in both certificates and returns the two
    /// reconstructed vote messages, when the certificates endorse different
    /// digests for the same (view, seq). This is how equivocation inside the
    /// committee is turned into a transferable conflict pair.
    pub fn conflicting_votes(&self, other: &QuorumCertificate) -> Option<(SignedMessage, SignedMessage)> {
        if self.view != other.view || self.seq != other.seq || self.digest == other.digest {
            return None;
        }
        for a in &self.votes {
            for b in &other.votes {
                if a.signer == b.signer && a.kind == b.kind {
                    return Some((
                        reconstruct_vote(self.view, self.seq, self.digest, a),
                        reconstruct_vote(other.view, other.seq, other.digest, b),
                    ));
                }
            }
        }
        None
    }
}

fn reconstruct_vote(view: u64, seq: u64, digest: Digest, vote: &CertVote) -> SignedMessage {
    let body = match vote.kind {
        MessageKind::Prepare => crate::message::MessageBody::Prepare,
        MessageKind::Approval => crate::message::MessageBody::Approval,
        _ => crate::message::MessageBody::Commit,
    };
    SignedMessage {
        view,
        seq,
        digest,
        sender: vote.signer,
        body,
        signature: vote.signature,
    }
}

/// Builds a certificate from vote messages if distinct valid signers meet
/// the threshold. Duplicate senders are counted once; for a root quorum the
/// signers must come from `committee`.
pub fn aggregate_quorum_cert(
    votes: &[SignedMessage],
    kind: ThresholdKind,
    committee: &CommitteeSelection,
    f: u32,
    c: u32,
    auth: &dyn Authenticator,
) -> Result<QuorumCertificate, QuorumError> {
    let first = votes.first().ok_or(QuorumError::InsufficientVotes {
        got: 0,
        need: threshold_for(kind, f, c),
    })?;
    let (view, seq, digest) = (first.view, first.seq, first.digest);

    let mut by_signer = std::collections::BTreeMap::new();
    for v in votes {
        if (v.view, v.seq, v.digest) != (view, seq, digest) {
            return Err(QuorumError::MixedDigests);
        }
        if !v.verify(auth) {
            return Err(QuorumError::BadSignature(v.sender));
        }
        if kind == ThresholdKind::RootQuorum && !committee.contains(v.sender) {
            continue;
        }
        by_signer.entry(v.sender).or_insert_with(|| CertVote {
            signer: v.sender,
            kind: v.kind(),
            signature: v.signature,
        });
    }

    let need = threshold_for(kind, f, c);
    if by_signer.len() < need {
        return Err(QuorumError::InsufficientVotes {
            got: by_signer.len(),
            need,
        });
    }
    Ok(QuorumCertificate {
        kind,
        view,
        seq,
        digest,
        votes: by_signer.into_values().collect(),
    })
}

fn threshold_for(kind: ThresholdKind, f: u32, c: u32) -> usize {
    match kind {
        ThresholdKind::RootQuorum => root_quorum_threshold(c),
        ThresholdKind::GlobalQuorum => global_quorum_threshold(f),
    }
}

/// True iff the certificate endorses `expected_digest` with enough distinct
/// valid signers, and (for a root quorum) all signers sit in `committee`.
pub fn verify_quorum_cert(
    cert: &QuorumCertificate,
    expected_digest: &Digest,
    committee: &CommitteeSelection,
    f: u32,
    c: u32,
    auth: &dyn Authenticator,
) -> bool {
    if cert.digest != *expected_digest {
        return false;
    }
    let need = threshold_for(cert.kind, f, c);
    let mut seen = std::collections::BTreeSet::new();
    for v in &cert.votes {
        if !seen.insert(v.signer) {
            continue;
        }
        if cert.kind == ThresholdKind::RootQuorum && !committee.contains(v.signer) {
            return false;
        }
        match v.kind {
            MessageKind::Prepare | MessageKind::Commit | MessageKind::Approval => {}
            _ => return false,
        }
        let bytes = vote_signing_bytes(v.kind, cert.view, cert.seq, &cert.digest);
        if !auth.verify(v.signer, &bytes, &v.signature) {
            return false;
        }
    }
    seen.len() >= need
}
