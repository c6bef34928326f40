//! Signed protocol messages. Every message carries a kind tag, the view and
//! sequence numbers it refers to, a digest, the sender id and a signature
//! over (kind, view, seq, digest, body).

use serde::Serialize;

use crate::auth::{Authenticator, Signature};
use crate::quorum::QuorumCertificate;
use crate::types::{wire, Block, Digest, ReplicaId};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub enum MessageKind {
    PrePrepare,
    Prepare,
    Commit,
    BlockProposal,
    Approval,
    Confirm,
    TimeoutComplaint,
    TimeoutFailure,
    ViewChange,
    HistoryQuorum,
    Ready,
    ReadyQuorum,
    MaliciousnessProof,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::PrePrepare => 1,
            MessageKind::Prepare => 2,
            MessageKind::Commit => 3,
            MessageKind::BlockProposal => 4,
            MessageKind::Approval => 5,
            MessageKind::Confirm => 6,
            MessageKind::TimeoutComplaint => 7,
            MessageKind::TimeoutFailure => 8,
            MessageKind::ViewChange => 9,
            MessageKind::HistoryQuorum => 10,
            MessageKind::Ready => 11,
            MessageKind::ReadyQuorum => 12,
            MessageKind::MaliciousnessProof => 13,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PrePrepare => "pre-prepare",
            MessageKind::Prepare => "prepare",
            MessageKind::Commit => "commit",
            MessageKind::BlockProposal => "block-proposal",
            MessageKind::Approval => "approval",
            MessageKind::Confirm => "confirm",
            MessageKind::TimeoutComplaint => "timeout-complaint",
            MessageKind::TimeoutFailure => "timeout-failure",
            MessageKind::ViewChange => "view-change",
            MessageKind::HistoryQuorum => "history-quorum",
            MessageKind::Ready => "ready",
            MessageKind::ReadyQuorum => "ready-quorum",
            MessageKind::MaliciousnessProof => "maliciousness-proof",
        }
    }
}

/// Self-authenticating evidence of committee misbehavior: either two
/// messages signed by one replica for the same (view, seq) with different
/// digests, or f+1 distinct timeout complaints for one view.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Proof {
    ConflictPair(Box<SignedMessage>, Box<SignedMessage>),
    ComplaintSet(Vec<SignedMessage>),
}

impl Proof {
    /// The view the proof indicts.
    pub fn view(&self) -> u64 {
        match self {
            Proof::ConflictPair(a, _) => a.view,
            Proof::ComplaintSet(cs) => cs.first().map(|m| m.view).unwrap_or(0),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Proof::ConflictPair(a, b) => {
                wire::put_u8(out, 1);
                a.encode(out);
                b.encode(out);
            }
            Proof::ComplaintSet(cs) => {
                wire::put_u8(out, 2);
                wire::put_u64(out, cs.len() as u64);
                for m in cs {
                    m.encode(out);
                }
            }
        }
    }

    /// Structural and cryptographic validity of the evidence.
    pub fn verify(&self, auth: &dyn Authenticator, f: u32) -> bool {
        match self {
            Proof::ConflictPair(a, b) => {
                a.sender == b.sender
                    && a.view == b.view
                    && a.seq == b.seq
                    && a.kind() == b.kind()
                    && a.digest != b.digest
                    && a.verify(auth)
                    && b.verify(auth)
            }
            Proof::ComplaintSet(cs) => {
                if cs.len() < (f as usize) + 1 {
                    return false;
                }
                let view = cs[0].view;
                let mut senders = std::collections::BTreeSet::new();
                for m in cs {
                    if m.kind() != MessageKind::TimeoutComplaint || m.view != view || !m.verify(auth)
                    {
                        return false;
                    }
                    senders.insert(m.sender);
                }
                senders.len() >= (f as usize) + 1
            }
        }
    }
}

/// Kind-specific payload. The envelope fields (view, seq, digest) carry the
/// common protocol coordinates; vote-style messages need no body at all.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum MessageBody {
    /// Proposed block, broadcast by the primary inside the root committee.
    PrePrepare { block: Block },
    Prepare,
    Commit,
    /// Block plus the root-committee commit quorum that backs it.
    BlockProposal {
        block: Block,
        cert: QuorumCertificate,
    },
    Approval,
    /// Global commit certificate. The block itself rides along only on the
    /// sync path; normal-path confirms reference the proposal by digest.
    Confirm {
        cert: QuorumCertificate,
        block: Option<Block>,
    },
    TimeoutComplaint,
    /// Envelope seq names the last block the sender holds.
    TimeoutFailure,
    /// Local history summary: envelope (view, seq, digest) name the new view
    /// and the sender's tip; the certificate proves the tip (absent at
    /// genesis).
    ViewChange { tip_cert: Option<QuorumCertificate> },
    /// Aggregated histories; envelope names the agreed tip.
    HistoryQuorum { entries: Vec<SignedMessage> },
    Ready,
    /// Aggregated readies; envelope names the agreed tip.
    ReadyQuorum { readies: Vec<SignedMessage> },
    MaliciousnessProof { proof: Proof },
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessageBody::PrePrepare { .. } => MessageKind::PrePrepare,
            MessageBody::Prepare => MessageKind::Prepare,
            MessageBody::Commit => MessageKind::Commit,
            MessageBody::BlockProposal { .. } => MessageKind::BlockProposal,
            MessageBody::Approval => MessageKind::Approval,
            MessageBody::Confirm { .. } => MessageKind::Confirm,
            MessageBody::TimeoutComplaint => MessageKind::TimeoutComplaint,
            MessageBody::TimeoutFailure => MessageKind::TimeoutFailure,
            MessageBody::ViewChange { .. } => MessageKind::ViewChange,
            MessageBody::HistoryQuorum { .. } => MessageKind::HistoryQuorum,
            MessageBody::Ready => MessageKind::Ready,
            MessageBody::ReadyQuorum { .. } => MessageKind::ReadyQuorum,
            MessageBody::MaliciousnessProof { .. } => MessageKind::MaliciousnessProof,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            MessageBody::PrePrepare { block } => block.encode(out),
            MessageBody::BlockProposal { block, cert } => {
                block.encode(out);
                cert.encode(out);
            }
            MessageBody::Confirm { cert, block } => {
                cert.encode(out);
                match block {
                    Some(b) => {
                        wire::put_u8(out, 1);
                        b.encode(out);
                    }
                    None => wire::put_u8(out, 0),
                }
            }
            MessageBody::ViewChange { tip_cert } => match tip_cert {
                Some(c) => {
                    wire::put_u8(out, 1);
                    c.encode(out);
                }
                None => wire::put_u8(out, 0),
            },
            MessageBody::HistoryQuorum { entries } => {
                wire::put_u64(out, entries.len() as u64);
                for e in entries {
                    e.encode(out);
                }
            }
            MessageBody::ReadyQuorum { readies } => {
                wire::put_u64(out, readies.len() as u64);
                for r in readies {
                    r.encode(out);
                }
            }
            MessageBody::MaliciousnessProof { proof } => proof.encode(out),
            MessageBody::Prepare
            | MessageBody::Commit
            | MessageBody::Approval
            | MessageBody::TimeoutComplaint
            | MessageBody::TimeoutFailure
            | MessageBody::Ready => {}
        }
    }
}

/// A signed protocol message.
#[derive(Clone, PartialEq, Eq)]
pub struct SignedMessage {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest,
    pub sender: ReplicaId,
    pub body: MessageBody,
    pub signature: Signature,
}

impl SignedMessage {
    pub fn sign(
        auth: &dyn Authenticator,
        sender: ReplicaId,
        view: u64,
        seq: u64,
        digest: Digest,
        body: MessageBody,
    ) -> SignedMessage {
        let bytes = signing_bytes(body.kind(), view, seq, &digest, &body);
        let signature = auth.sign(sender, &bytes);
        SignedMessage {
            view,
            seq,
            digest,
            sender,
            body,
            signature,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn verify(&self, auth: &dyn Authenticator) -> bool {
        let bytes = signing_bytes(self.kind(), self.view, self.seq, &self.digest, &self.body);
        auth.verify(self.sender, &bytes, &self.signature)
    }

    /// Full wire encoding including sender and signature, used when a message
    /// is embedded inside another (quorums, proofs).
    pub fn encode(&self, out: &mut Vec<u8>) {
        wire::put_u32(out, self.sender.0);
        let bytes = signing_bytes(self.kind(), self.view, self.seq, &self.digest, &self.body);
        wire::put_bytes(out, &bytes);
        out.extend_from_slice(&self.signature.0);
    }
}

impl std::fmt::Debug for SignedMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}(v{} s{} {} from {:?})",
            self.kind().name(),
            self.view,
            self.seq,
            self.digest.short(),
            self.sender
        )
    }
}

/// Bytes covered by the signature: (kind, view, seq, digest, body).
pub fn signing_bytes(
    kind: MessageKind,
    view: u64,
    seq: u64,
    digest: &Digest,
    body: &MessageBody,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    wire::put_u8(&mut out, kind.tag());
    wire::put_u64(&mut out, view);
    wire::put_u64(&mut out, seq);
    wire::put_digest(&mut out, digest);
    body.encode(&mut out);
    out
}

/// Reconstructs the signing bytes of a bare vote (prepare, commit or
/// approval): these have empty bodies, so (kind, view, seq, digest) is the
/// entire preimage. Used to verify certificate entries.
pub fn vote_signing_bytes(kind: MessageKind, view: u64, seq: u64, digest: &Digest) -> Vec<u8> {
    let body = match kind {
        MessageKind::Prepare => MessageBody::Prepare,
        MessageKind::Commit => MessageBody::Commit,
        MessageKind::Approval => MessageBody::Approval,
        _ => MessageBody::Commit,
    };
    signing_bytes(kind, view, seq, digest, &body)
}
