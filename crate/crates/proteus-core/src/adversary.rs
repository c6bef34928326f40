//! Byzantine strategy catalog, applied as wrappers around the honest step
//! function. A strategy may drop, duplicate, delay or replace its own
//! replica's outbound messages and signatures; it can never forge another
//! replica's signature.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{MessageBody, MessageKind, SignedMessage};
use crate::quorum::{root_quorum_threshold, CertVote, QuorumCertificate, ThresholdKind};
use crate::replica::{OutboundMessage, Replica, ReplicaEvent, StepOutput};
use crate::types::{Block, ReplicaId, Transaction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum AdversaryStrategy {
    Honest,
    /// Emits nothing from the given tick onward.
    Crash {
        #[serde(default)]
        after_tick: u64,
    },
    /// Suppresses own pre-prepares and block proposals.
    SilentPrimary,
    /// As primary: proposes two different blocks to two halves of the
    /// committee. As committee member: votes for every variant it sees and
    /// rebroadcasts every certified variant, the colluder role.
    EquivocatingPrimary,
    /// Suppresses own prepares, commits and approvals.
    WithholdVotes,
    /// Reports a stale tip during view changes.
    ConflictingHistory,
    /// Postpones all outbound messages; delivery still happens.
    DelayAll { ticks: u64 },
}

impl Default for AdversaryStrategy {
    fn default() -> Self {
        AdversaryStrategy::Honest
    }
}

impl AdversaryStrategy {
    pub fn is_byzantine(&self) -> bool {
        !matches!(self, AdversaryStrategy::Honest)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("strategy for {replica:?} attempted to sign as {attempted:?}")]
    ForbiddenForgery {
        replica: ReplicaId,
        attempted: ReplicaId,
    },
}

/// Transforms the honest output of `replica` for `event` according to the
/// strategy. Deterministic given the inputs, so failures replay exactly.
pub fn apply_strategy(
    strategy: &AdversaryStrategy,
    replica: &Replica,
    event: Option<&ReplicaEvent>,
    tick: u64,
    honest: StepOutput,
) -> Result<StepOutput, AdversaryError> {
    let out = match strategy {
        AdversaryStrategy::Honest => honest,
        AdversaryStrategy::Crash { after_tick } => {
            if tick >= *after_tick {
                StepOutput::default()
            } else {
                honest
            }
        }
        AdversaryStrategy::SilentPrimary => {
            let mut out = honest;
            out.messages.retain(|m| {
                !matches!(
                    m.message.kind(),
                    MessageKind::PrePrepare | MessageKind::BlockProposal
                )
            });
            out
        }
        AdversaryStrategy::WithholdVotes => {
            let mut out = honest;
            out.messages.retain(|m| {
                !matches!(
                    m.message.kind(),
                    MessageKind::Prepare | MessageKind::Commit | MessageKind::Approval
                )
            });
            out
        }
        AdversaryStrategy::DelayAll { ticks } => {
            let mut out = honest;
            for m in &mut out.messages {
                m.extra_delay += ticks;
            }
            out
        }
        AdversaryStrategy::ConflictingHistory => stale_history(replica, honest),
        AdversaryStrategy::EquivocatingPrimary => equivocate(replica, event, honest),
    };
    for m in &out.messages {
        if m.message.sender != replica.id() {
            return Err(AdversaryError::ForbiddenForgery {
                replica: replica.id(),
                attempted: m.message.sender,
            });
        }
    }
    Ok(out)
}

/// Replaces outgoing history summaries with ones for the previous tip.
fn stale_history(replica: &Replica, mut honest: StepOutput) -> StepOutput {
    for m in &mut honest.messages {
        if m.message.kind() != MessageKind::ViewChange {
            continue;
        }
        let tip = replica.chain().tip_seq();
        let stale_seq = tip.saturating_sub(1);
        let digest = match replica.chain().digest_at(stale_seq) {
            Some(d) => d,
            None => continue,
        };
        let cert = replica.chain().cert_at(stale_seq).cloned();
        m.message = SignedMessage::sign(
            replica.auth.as_ref(),
            replica.id(),
            m.message.view,
            stale_seq,
            digest,
            MessageBody::ViewChange { tip_cert: cert },
        );
    }
    honest
}

/// Derives the second proposal variant: same view, seq and predecessor, with
/// a marker transaction appended so the digest differs deterministically.
fn alternate_block(block: &Block) -> Block {
    let mut payload = block.payload.clone();
    payload.push(Transaction(b"equivocation-marker".to_vec()));
    Block::new(block.view, block.seq, payload, block.prev)
}

fn equivocate(
    replica: &Replica,
    event: Option<&ReplicaEvent>,
    mut honest: StepOutput,
) -> StepOutput {
    // Primary role: split the committee and send each half a different
    // block.
    let mut extra: Vec<OutboundMessage> = Vec::new();
    for m in &mut honest.messages {
        if m.message.kind() != MessageKind::PrePrepare {
            continue;
        }
        let MessageBody::PrePrepare { block } = &m.message.body else {
            continue;
        };
        let alt = alternate_block(block);
        let (evens, odds): (Vec<ReplicaId>, Vec<ReplicaId>) =
            m.recipients.iter().partition(|r| r.0 % 2 == 0);
        let alt_msg = SignedMessage::sign(
            replica.auth.as_ref(),
            replica.id(),
            m.message.view,
            m.message.seq,
            alt.digest,
            MessageBody::PrePrepare { block: alt },
        );
        m.recipients = evens;
        extra.push(OutboundMessage {
            recipients: odds,
            message: alt_msg,
            extra_delay: 0,
        });
    }
    honest.messages.extend(extra);

    // Colluder role: vote for every variant the honest machine refused, and
    // rebroadcast certified variants the honest machine would not.
    let Some(ReplicaEvent::Deliver(msg)) = event else {
        return honest;
    };
    if msg.view != replica.view() || !replica.is_root_member() {
        return honest;
    }
    let committee = replica.committee().members.clone();
    let all: Vec<ReplicaId> = (0..replica.committee_n()).map(ReplicaId).collect();
    let already = |out: &StepOutput, kind: MessageKind, msg: &SignedMessage| {
        out.messages.iter().any(|m| {
            m.message.kind() == kind && m.message.seq == msg.seq && m.message.digest == msg.digest
        })
    };
    match msg.kind() {
        MessageKind::PrePrepare => {
            if !already(&honest, MessageKind::Prepare, msg) {
                extra_vote(replica, msg, MessageBody::Prepare, committee, &mut honest);
            }
        }
        MessageKind::Prepare => {
            let count = replica.prepare_count(msg.view, msg.seq, msg.digest);
            if count >= root_quorum_threshold(replica.committee().size())
                && !already(&honest, MessageKind::Commit, msg)
            {
                extra_vote(replica, msg, MessageBody::Commit, committee, &mut honest);
            }
        }
        MessageKind::Commit => {
            // Once a variant gathers a commit quorum, rebroadcast it even if
            // another variant was already proposed.
            if let Some((block, votes)) = replica.commit_quorum_parts(msg.view, msg.seq, msg.digest)
            {
                if !already(&honest, MessageKind::BlockProposal, msg) {
                    let cert = QuorumCertificate {
                        kind: ThresholdKind::RootQuorum,
                        view: msg.view,
                        seq: msg.seq,
                        digest: msg.digest,
                        votes,
                    };
                    let proposal = SignedMessage::sign(
                        replica.auth.as_ref(),
                        replica.id(),
                        msg.view,
                        msg.seq,
                        msg.digest,
                        MessageBody::BlockProposal { block, cert },
                    );
                    honest.messages.push(OutboundMessage {
                        recipients: all,
                        message: proposal,
                        extra_delay: 0,
                    });
                }
            }
        }
        MessageKind::BlockProposal => {
            if !already(&honest, MessageKind::Approval, msg) {
                extra_vote(replica, msg, MessageBody::Approval, committee, &mut honest);
            }
        }
        _ => {}
    }
    honest
}

fn extra_vote(
    replica: &Replica,
    about: &SignedMessage,
    body: MessageBody,
    recipients: Vec<ReplicaId>,
    out: &mut StepOutput,
) {
    let vote = SignedMessage::sign(
        replica.auth.as_ref(),
        replica.id(),
        about.view,
        about.seq,
        about.digest,
        body,
    );
    out.messages.push(OutboundMessage {
        recipients,
        message: vote,
        extra_delay: 0,
    });
}

impl Replica {
    pub(crate) fn committee_n(&self) -> u32 {
        self.cfg.n
    }

    pub(crate) fn prepare_count(&self, view: u64, seq: u64, digest: crate::types::Digest) -> usize {
        self.prepare_votes
            .get(&(view, seq, digest))
            .map(|m| m.len())
            .unwrap_or(0)
    }

    /// Block and commit votes for a variant that reached a commit quorum.
    pub(crate) fn commit_quorum_parts(
        &self,
        view: u64,
        seq: u64,
        digest: crate::types::Digest,
    ) -> Option<(Block, Vec<CertVote>)> {
        let votes = self.commit_votes.get(&(view, seq, digest))?;
        if votes.len() < root_quorum_threshold(self.cfg.c) {
            return None;
        }
        let block = self.pending_blocks.get(&(view, seq, digest))?.clone();
        let votes = votes
            .values()
            .map(|m| CertVote {
                signer: m.sender,
                kind: m.kind(),
                signature: m.signature,
            })
            .collect();
        Some((block, votes))
    }
}
