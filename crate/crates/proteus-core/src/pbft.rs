//! Minimal PBFT normal-case state machine: pre-prepare from the primary,
//! all-to-all prepare, all-to-all commit, quorums of 2f+1. Used purely as a
//! message-count and latency-trend baseline; view change is out of scope.

use std::collections::{BTreeMap, BTreeSet};

use crate::auth::SharedAuthenticator;
use crate::chain::Chain;
use crate::committee::CommitteeSelection;
use crate::message::{MessageBody, MessageKind, SignedMessage};
use crate::quorum::{global_quorum_threshold, CertVote, QuorumCertificate, ThresholdKind};
use crate::replica::{OutboundMessage, ReplicaEvent, StepOutput};
use crate::types::{Block, Digest, ReplicaId, Transaction};

pub struct PbftReplica {
    id: ReplicaId,
    n: u32,
    f: u32,
    auth: SharedAuthenticator,
    view: u64,
    chain: Chain,
    everyone: CommitteeSelection,
    prepare_votes: BTreeMap<(u64, u64, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    commit_votes: BTreeMap<(u64, u64, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    sent_prepare: BTreeSet<(u64, u64)>,
    sent_commit: BTreeSet<(u64, u64)>,
    pending_blocks: BTreeMap<(u64, u64, Digest), Block>,
    inflight: Option<u64>,
}

impl PbftReplica {
    pub fn new(id: ReplicaId, n: u32, f: u32, auth: SharedAuthenticator) -> PbftReplica {
        let everyone = CommitteeSelection {
            view: 0,
            members: (0..n).map(ReplicaId).collect(),
            primary: ReplicaId(0),
        };
        PbftReplica {
            id,
            n,
            f,
            auth,
            view: 0,
            chain: Chain::new(),
            everyone,
            prepare_votes: BTreeMap::new(),
            commit_votes: BTreeMap::new(),
            sent_prepare: BTreeSet::new(),
            sent_commit: BTreeSet::new(),
            pending_blocks: BTreeMap::new(),
            inflight: None,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn tip_seq(&self) -> u64 {
        self.chain.tip_seq()
    }

    pub fn is_primary(&self) -> bool {
        self.id == self.primary()
    }

    pub fn has_inflight(&self) -> bool {
        matches!(self.inflight, Some(s) if s > self.tip_seq())
    }

    fn primary(&self) -> ReplicaId {
        ReplicaId((self.view % self.n as u64) as u32)
    }

    fn all(&self) -> Vec<ReplicaId> {
        (0..self.n).map(ReplicaId).collect()
    }

    fn threshold(&self) -> usize {
        global_quorum_threshold(self.f)
    }

    fn send(
        &self,
        out: &mut StepOutput,
        recipients: Vec<ReplicaId>,
        seq: u64,
        digest: Digest,
        body: MessageBody,
    ) {
        let msg = SignedMessage::sign(self.auth.as_ref(), self.id, self.view, seq, digest, body);
        out.messages.push(OutboundMessage {
            recipients,
            message: msg,
            extra_delay: 0,
        });
    }

    pub fn make_proposal(&mut self, txs: Vec<Transaction>) -> StepOutput {
        let mut out = StepOutput::default();
        if !self.is_primary() {
            return out;
        }
        let seq = self.tip_seq() + 1;
        if self.inflight == Some(seq) {
            return out;
        }
        self.inflight = Some(seq);
        let block = Block::new(self.view, seq, txs, self.chain.tip_digest());
        self.pending_blocks
            .insert((self.view, seq, block.digest), block.clone());
        let digest = block.digest;
        self.send(
            &mut out,
            self.all(),
            seq,
            digest,
            MessageBody::PrePrepare { block },
        );
        out
    }

    pub fn step(&mut self, event: ReplicaEvent) -> StepOutput {
        let mut out = StepOutput::default();
        let ReplicaEvent::Deliver(msg) = event else {
            return out;
        };
        if !msg.verify(self.auth.as_ref()) {
            out.note("bad-signature", format!("{msg:?}"));
            return out;
        }
        match msg.kind() {
            MessageKind::PrePrepare => self.on_preprepare(msg, &mut out),
            MessageKind::Prepare => self.on_prepare(msg, &mut out),
            MessageKind::Commit => self.on_commit(msg, &mut out),
            _ => {}
        }
        out
    }

    fn on_preprepare(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.sender != self.primary() || msg.view != self.view {
            return;
        }
        let MessageBody::PrePrepare { block } = &msg.body else {
            return;
        };
        let block = block.clone();
        if !block.digest_consistent() || msg.digest != block.digest || block.seq != msg.seq {
            return;
        }
        self.pending_blocks
            .insert((msg.view, msg.seq, msg.digest), block);
        if self.sent_prepare.insert((msg.view, msg.seq)) {
            self.send(out, self.all(), msg.seq, msg.digest, MessageBody::Prepare);
        }
        // A quorum may already be waiting on this block.
        self.try_promote(msg.view, msg.seq, msg.digest, out);
    }

    fn on_prepare(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view != self.view {
            return;
        }
        let key = (msg.view, msg.seq, msg.digest);
        self.prepare_votes
            .entry(key)
            .or_default()
            .entry(msg.sender)
            .or_insert(msg.clone());
        self.try_promote(msg.view, msg.seq, msg.digest, out);
    }

    fn on_commit(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view != self.view {
            return;
        }
        let key = (msg.view, msg.seq, msg.digest);
        self.commit_votes
            .entry(key)
            .or_default()
            .entry(msg.sender)
            .or_insert(msg.clone());
        self.try_promote(msg.view, msg.seq, msg.digest, out);
    }

    /// Advances the (view, seq, digest) slot as far as accumulated votes
    /// allow: send the commit at the prepare quorum, append at the commit
    /// quorum, then revisit buffered votes for the next sequence number.
    fn try_promote(&mut self, view: u64, seq: u64, digest: Digest, out: &mut StepOutput) {
        let key = (view, seq, digest);
        if self
            .prepare_votes
            .get(&key)
            .map(|v| v.len() >= self.threshold())
            .unwrap_or(false)
            && self.sent_commit.insert((view, seq))
        {
            self.send(out, self.all(), seq, digest, MessageBody::Commit);
        }
        if seq != self.tip_seq() + 1 {
            return;
        }
        let Some(commits) = self.commit_votes.get(&key) else {
            return;
        };
        if commits.len() < self.threshold() {
            return;
        }
        let Some(block) = self.pending_blocks.get(&key).cloned() else {
            return;
        };
        let cert = QuorumCertificate {
            kind: ThresholdKind::GlobalQuorum,
            view,
            seq,
            digest,
            votes: commits
                .values()
                .map(|m| CertVote {
                    signer: m.sender,
                    kind: m.kind(),
                    signature: m.signature,
                })
                .collect(),
        };
        if self
            .chain
            .append(
                block.clone(),
                cert.clone(),
                &self.everyone,
                self.f,
                self.n,
                self.auth.as_ref(),
            )
            .is_ok()
        {
            out.committed.push((block, cert));
            let tip = self.tip_seq();
            self.prepare_votes.retain(|&(_, s, _), _| s > tip);
            self.commit_votes.retain(|&(_, s, _), _| s > tip);
            self.pending_blocks.retain(|&(_, s, _), _| s > tip);
            // Buffered votes for the next slot may complete immediately.
            let next: Vec<(u64, u64, Digest)> = self
                .commit_votes
                .keys()
                .filter(|&&(v, s, _)| v == self.view && s == tip + 1)
                .copied()
                .collect();
            for (v, s, d) in next {
                self.try_promote(v, s, d, out);
            }
        }
    }
}
