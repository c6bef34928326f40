//! Normal-mode replica state machine.
//!
//! Each replica is a deterministic step function from (state, event) to
//! (state, outbound messages, timer actions). The root committee runs the
//! internal pre-prepare/prepare/commit round; every replica, committee
//! members included, runs the approval path against committee proposals;
//! commits happen only under a global quorum certificate.
//!
//! View-change handling lives in the sibling `view_change` module as further
//! `impl Replica` blocks sharing this state.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::auth::SharedAuthenticator;
use crate::chain::Chain;
use crate::committee::{select_committee, CommitteeSelection};
use crate::message::{MessageBody, MessageKind, Proof, SignedMessage};
use crate::quorum::{
    global_quorum_threshold, root_quorum_threshold, verify_quorum_cert, CertVote,
    QuorumCertificate, ThresholdKind,
};
use crate::types::{Block, Digest, ReplicaId, Transaction};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Normal,
    ViewChange,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum TimerId {
    /// A regular replica's wait for the epoch at (view, seq) to deliver a
    /// valid proposal.
    Epoch { view: u64, seq: u64 },
    /// A committee member's wait for the internal round at (view, seq) to
    /// reach a commit quorum.
    BlockTimer { view: u64, seq: u64 },
    /// Wait for an initiated view change to complete.
    ViewChangeTimer { view: u64 },
}

#[derive(Clone, Debug)]
pub enum ReplicaEvent {
    Deliver(SignedMessage),
    TimerFired(TimerId),
}

/// One logical send: the same signed message to a set of recipients.
/// Broadcasts include the sender itself; the harness delivers self-copies at
/// zero latency and excludes them from message counts.
#[derive(Clone, Debug)]
pub struct OutboundMessage {
    pub recipients: Vec<ReplicaId>,
    pub message: SignedMessage,
    /// Additional delivery delay in ticks, imposed by delaying adversaries.
    pub extra_delay: u64,
}

#[derive(Clone, Debug)]
pub struct TraceNote {
    pub tag: &'static str,
    pub detail: String,
}

/// Everything a single step produced. Pure data; the harness interprets it.
#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    pub messages: Vec<OutboundMessage>,
    pub timer_sets: Vec<(TimerId, u64)>,
    pub timer_cancels: Vec<TimerId>,
    pub committed: Vec<(Block, QuorumCertificate)>,
    /// Set when this step moved the replica into a view change.
    pub entered_view: Option<u64>,
    /// Set when this step completed a view change back to normal mode.
    pub completed_view: Option<u64>,
    pub notes: Vec<TraceNote>,
}

impl StepOutput {
    pub fn note(&mut self, tag: &'static str, detail: String) {
        self.notes.push(TraceNote { tag, detail });
    }

    pub fn merge(&mut self, other: StepOutput) {
        self.messages.extend(other.messages);
        self.timer_sets.extend(other.timer_sets);
        self.timer_cancels.extend(other.timer_cancels);
        self.committed.extend(other.committed);
        self.entered_view = other.entered_view.or(self.entered_view);
        self.completed_view = other.completed_view.or(self.completed_view);
        self.notes.extend(other.notes);
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ProposalError {
    #[error("replica is not the primary of the current committee")]
    NotPrimary,
    #[error("replica is not in normal mode")]
    WrongMode,
}

/// Static per-replica configuration.
#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub n: u32,
    pub f: u32,
    pub c: u32,
    /// Shared committee-selection seed; every replica derives identical
    /// committees from it.
    pub committee_seed: Vec<u8>,
    /// Ticks a regular replica waits for an epoch before complaining.
    pub epoch_timeout: u64,
    /// Ticks a committee member waits for the internal round.
    pub block_timeout: u64,
}

/// State carried across view changes.
#[derive(Debug, Default)]
pub(crate) struct VcState {
    /// Latest summary per sender (committee members accumulate these).
    pub summaries: BTreeMap<ReplicaId, SignedMessage>,
    /// Agreed tips for which this member already broadcast a history quorum.
    pub q_broadcast: BTreeSet<(u64, Digest)>,
    /// Highest agreed tip learned from any valid history quorum.
    pub best_q: Option<(u64, Digest)>,
    pub ready_sent: Option<(u64, Digest)>,
    /// Distinct readies per claimed tip (committee members).
    pub readies: BTreeMap<(u64, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    pub p_broadcast: BTreeSet<(u64, Digest)>,
    /// A verified ready quorum waiting for local sync to catch up.
    pub pending_p: Option<SignedMessage>,
    /// Peers already asked for missing blocks this view.
    pub sync_asked: BTreeSet<ReplicaId>,
    /// Tip seq covered by the last summary this replica broadcast.
    pub summarized_tip: u64,
}

pub struct Replica {
    pub(crate) cfg: ReplicaConfig,
    pub(crate) id: ReplicaId,
    pub(crate) auth: SharedAuthenticator,
    pub(crate) view: u64,
    pub(crate) mode: Mode,
    pub(crate) committee: CommitteeSelection,
    pub(crate) chain: Chain,

    // Vote accumulators keyed by (view, seq, digest); only
    // signature-verified messages enter them.
    pub(crate) prepare_votes: BTreeMap<(u64, u64, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    pub(crate) commit_votes: BTreeMap<(u64, u64, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    /// Combined signer set toward the global quorum: committee commit
    /// signatures merged with approvals, one entry per signer.
    pub(crate) approval_votes: BTreeMap<(u64, u64, Digest), BTreeMap<ReplicaId, CertVote>>,

    // Once-only markers per (view, seq).
    pub(crate) sent_prepare: BTreeSet<(u64, u64)>,
    pub(crate) sent_commit: BTreeSet<(u64, u64)>,
    pub(crate) sent_approval: BTreeSet<(u64, u64)>,
    pub(crate) sent_proposal: BTreeSet<(u64, u64)>,
    pub(crate) sent_confirm: BTreeSet<(u64, u64)>,
    pub(crate) sent_complaint: BTreeSet<(u64, u64)>,
    pub(crate) sent_timeoutfailure: BTreeSet<(u64, u64)>,
    pub(crate) block_timer_armed: BTreeSet<(u64, u64)>,

    /// First pre-prepare seen per (view, seq), for equivocation detection.
    pub(crate) seen_preprepare: BTreeMap<(u64, u64), SignedMessage>,
    /// First valid block proposal seen per (view, seq).
    pub(crate) seen_proposal: BTreeMap<(u64, u64), SignedMessage>,
    /// Epochs where primary equivocation was detected; votes are withheld.
    pub(crate) tainted: BTreeSet<(u64, u64)>,
    /// Blocks by coordinates, from pre-prepares and proposals.
    pub(crate) pending_blocks: BTreeMap<(u64, u64, Digest), Block>,
    /// The primary's own in-flight proposal.
    pub(crate) inflight: Option<(u64, u64)>,

    /// Distinct timeout complaints per view.
    pub(crate) complaints: BTreeMap<u64, BTreeMap<ReplicaId, SignedMessage>>,
    /// Views for which this replica already broadcast a maliciousness proof.
    pub(crate) proof_broadcast: BTreeSet<u64>,
    /// Sync responses already produced, per (peer, last-held seq, view).
    pub(crate) sync_served: BTreeSet<(ReplicaId, u64, u64)>,

    /// Certificates waiting for their predecessor or block: seq ->
    /// (certificate, block if it travelled with the certificate).
    pub(crate) pending_certs: BTreeMap<u64, (QuorumCertificate, Option<Block>)>,

    /// Retained maliciousness evidence (also surfaced to tests).
    pub(crate) evidence: Vec<Proof>,

    pub(crate) vc: VcState,
    /// Summaries for views this replica has not joined yet.
    pub(crate) buffered_summaries: BTreeMap<u64, Vec<SignedMessage>>,
    /// Normal-mode traffic for views this replica has not (re-)entered yet,
    /// replayed once the view change completes.
    pub(crate) buffered_normal: Vec<SignedMessage>,
    /// Last history/ready quorum this replica broadcast, kept to help
    /// laggards after the view change completed.
    pub(crate) last_q: Option<SignedMessage>,
    pub(crate) last_p: Option<SignedMessage>,
}

impl Replica {
    pub fn new(id: ReplicaId, cfg: ReplicaConfig, auth: SharedAuthenticator) -> Replica {
        let committee = select_committee(&cfg.committee_seed, 0, cfg.n, cfg.c)
            .expect("valid committee parameters");
        Replica {
            id,
            auth,
            view: 0,
            mode: Mode::Normal,
            committee,
            chain: Chain::new(),
            prepare_votes: BTreeMap::new(),
            commit_votes: BTreeMap::new(),
            approval_votes: BTreeMap::new(),
            sent_prepare: BTreeSet::new(),
            sent_commit: BTreeSet::new(),
            sent_approval: BTreeSet::new(),
            sent_proposal: BTreeSet::new(),
            sent_confirm: BTreeSet::new(),
            sent_complaint: BTreeSet::new(),
            sent_timeoutfailure: BTreeSet::new(),
            block_timer_armed: BTreeSet::new(),
            seen_preprepare: BTreeMap::new(),
            seen_proposal: BTreeMap::new(),
            tainted: BTreeSet::new(),
            pending_blocks: BTreeMap::new(),
            inflight: None,
            complaints: BTreeMap::new(),
            proof_broadcast: BTreeSet::new(),
            sync_served: BTreeSet::new(),
            pending_certs: BTreeMap::new(),
            evidence: Vec::new(),
            vc: VcState::default(),
            buffered_summaries: BTreeMap::new(),
            buffered_normal: Vec::new(),
            last_q: None,
            last_p: None,
            cfg,
        }
    }

    // ------------------------------------------------------------------
    // Inspection
    // ------------------------------------------------------------------

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn committee(&self) -> &CommitteeSelection {
        &self.committee
    }

    pub fn is_root_member(&self) -> bool {
        self.committee.contains(self.id)
    }

    pub fn is_primary(&self) -> bool {
        self.committee.primary == self.id
    }

    pub fn tip_seq(&self) -> u64 {
        self.chain.tip_seq()
    }

    /// True when the primary already has a proposal outstanding for the next
    /// sequence number in the current view.
    pub fn has_inflight(&self) -> bool {
        matches!(self.inflight, Some((v, s)) if v == self.view && s > self.tip_seq())
    }

    pub fn evidence(&self) -> &[Proof] {
        &self.evidence
    }

    fn root_threshold(&self) -> usize {
        root_quorum_threshold(self.cfg.c)
    }

    fn global_threshold(&self) -> usize {
        global_quorum_threshold(self.cfg.f)
    }

    fn committee_recipients(&self) -> Vec<ReplicaId> {
        self.committee.members.clone()
    }

    fn all_recipients(&self) -> Vec<ReplicaId> {
        (0..self.cfg.n).map(ReplicaId).collect()
    }

    pub(crate) fn send(
        &self,
        out: &mut StepOutput,
        recipients: Vec<ReplicaId>,
        view: u64,
        seq: u64,
        digest: Digest,
        body: MessageBody,
    ) {
        let msg = SignedMessage::sign(self.auth.as_ref(), self.id, view, seq, digest, body);
        out.messages.push(OutboundMessage {
            recipients,
            message: msg,
            extra_delay: 0,
        });
    }

    /// Initial timer arming; the harness applies this once at startup.
    pub fn startup(&self) -> StepOutput {
        let mut out = StepOutput::default();
        out.timer_sets
            .push((TimerId::Epoch { view: 0, seq: 1 }, self.cfg.epoch_timeout));
        out
    }

    // ------------------------------------------------------------------
    // Step dispatch
    // ------------------------------------------------------------------

    pub fn step(&mut self, event: ReplicaEvent) -> StepOutput {
        let mut out = StepOutput::default();
        match event {
            ReplicaEvent::Deliver(msg) => {
                if !msg.verify(self.auth.as_ref()) {
                    out.note("bad-signature", format!("{msg:?}"));
                    return out;
                }
                self.dispatch(msg, &mut out);
            }
            ReplicaEvent::TimerFired(timer) => self.on_timer(timer, &mut out),
        }
        out
    }

    fn dispatch(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        match msg.kind() {
            // Mode-independent: certificates and proofs are
            // self-authenticating.
            MessageKind::Confirm => self.handle_confirm(msg, out),
            MessageKind::MaliciousnessProof => self.handle_maliciousness_proof(msg, out),
            MessageKind::TimeoutComplaint => self.handle_timeout_complaint(msg, out),
            MessageKind::TimeoutFailure => self.handle_timeoutfailure(msg, out),
            MessageKind::ViewChange => self.vc_handle_summary(msg, out),
            MessageKind::HistoryQuorum => self.vc_handle_quorum(msg, out),
            MessageKind::Ready => self.vc_handle_ready(msg, out),
            MessageKind::ReadyQuorum => self.vc_handle_ready_quorum(msg, out),

            // Normal-mode traffic.
            MessageKind::PrePrepare => self.handle_preprepare(msg, out),
            MessageKind::Prepare => self.handle_prepare(msg, out),
            MessageKind::Commit => self.handle_commit(msg, out),
            MessageKind::BlockProposal => self.handle_block_proposal(msg, out),
            MessageKind::Approval => self.handle_approval(msg, out),
        }
    }

    fn on_timer(&mut self, timer: TimerId, out: &mut StepOutput) {
        match timer {
            TimerId::Epoch { view, seq } => self.on_epoch_timeout(view, seq, out),
            TimerId::BlockTimer { view, seq } => self.on_block_timeout(view, seq, out),
            TimerId::ViewChangeTimer { view } => self.on_view_change_timeout(view, out),
        }
    }

    /// Normal-mode traffic can overtake a view change: a replica that
    /// completed the change earlier starts the next epoch while we are still
    /// exchanging readies. Hold such messages and replay them on completion
    /// instead of dropping the epoch on the floor.
    fn try_buffer_normal(&mut self, msg: &SignedMessage, out: &mut StepOutput) -> bool {
        let ahead_of_us = msg.view > self.view
            || (msg.view == self.view && self.mode == Mode::ViewChange);
        if !ahead_of_us {
            return false;
        }
        if self.buffered_normal.len() < 8 * self.cfg.n as usize {
            self.buffered_normal.push(msg.clone());
        } else {
            out.note("buffer-overflow", format!("{msg:?}"));
        }
        true
    }

    pub(crate) fn dispatch_buffered(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        match msg.kind() {
            MessageKind::PrePrepare => self.handle_preprepare(msg, out),
            MessageKind::Prepare => self.handle_prepare(msg, out),
            MessageKind::Commit => self.handle_commit(msg, out),
            MessageKind::BlockProposal => self.handle_block_proposal(msg, out),
            MessageKind::Approval => self.handle_approval(msg, out),
            _ => {}
        }
    }

    // ------------------------------------------------------------------
    // Proposing
    // ------------------------------------------------------------------

    /// Forms a block from `txs` and opens the committee round for it. Only
    /// the primary of the current committee may call this in normal mode.
    pub fn make_proposal(&mut self, txs: Vec<Transaction>) -> Result<StepOutput, ProposalError> {
        if self.mode != Mode::Normal {
            return Err(ProposalError::WrongMode);
        }
        if !self.is_primary() {
            return Err(ProposalError::NotPrimary);
        }
        let mut out = StepOutput::default();
        let seq = self.tip_seq() + 1;
        if self.inflight == Some((self.view, seq)) {
            return Ok(out);
        }
        let block = Block::new(self.view, seq, txs, self.chain.tip_digest());
        let key = (self.view, seq, block.digest);
        self.pending_blocks.insert(key, block.clone());
        self.inflight = Some((self.view, seq));
        if self.block_timer_armed.insert((self.view, seq)) {
            out.timer_sets.push((
                TimerId::BlockTimer {
                    view: self.view,
                    seq,
                },
                self.cfg.block_timeout,
            ));
        }
        out.note("propose", format!("seq {} view {}", seq, self.view));
        let digest = block.digest;
        self.send(
            &mut out,
            self.committee_recipients(),
            self.view,
            seq,
            digest,
            MessageBody::PrePrepare { block },
        );
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Committee-internal round
    // ------------------------------------------------------------------

    fn handle_preprepare(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if self.try_buffer_normal(&msg, out) {
            return;
        }
        if !self.is_root_member() || msg.view != self.view {
            out.note("drop-preprepare", format!("{msg:?}"));
            return;
        }
        if msg.sender != self.committee.primary {
            out.note("bad-sender", format!("{msg:?}"));
            return;
        }
        let MessageBody::PrePrepare { block } = &msg.body else {
            return;
        };
        let block = block.clone();

        // Equivocation by the primary: retain the conflicting pair, withhold
        // votes for this epoch.
        if let Some(first) = self.seen_preprepare.get(&(msg.view, msg.seq)) {
            if first.digest != msg.digest {
                let pair = Proof::ConflictPair(Box::new(first.clone()), Box::new(msg.clone()));
                out.note("equivocating-primary", format!("{msg:?}"));
                self.evidence.push(pair);
                self.tainted.insert((msg.view, msg.seq));
            }
            return;
        }

        // Validity: seq, view, predecessor digest, recomputed hash,
        // transaction well-formedness.
        if msg.seq != block.seq
            || msg.view != block.view
            || msg.digest != block.digest
            || !block.digest_consistent()
        {
            out.note("bad-hash", format!("{msg:?}"));
            return;
        }
        if block.seq > self.tip_seq() + 1 {
            // The primary is ahead of us; keep the block and catch up.
            self.pending_blocks
                .insert((msg.view, msg.seq, msg.digest), block);
            out.note("bad-seq", format!("{msg:?}"));
            self.request_sync(msg.sender, out);
            self.try_advance_chain(out);
            return;
        }
        if block.seq != self.tip_seq() + 1 {
            out.note("bad-seq", format!("{msg:?}"));
            return;
        }
        if block.prev != self.chain.tip_digest() {
            out.note("bad-prev", format!("{msg:?}"));
            return;
        }
        if !block.payload.iter().all(Transaction::is_well_formed) {
            out.note("bad-txs", format!("{msg:?}"));
            return;
        }

        self.seen_preprepare.insert((msg.view, msg.seq), msg.clone());
        self.pending_blocks
            .insert((msg.view, msg.seq, msg.digest), block);
        if self.block_timer_armed.insert((msg.view, msg.seq)) {
            out.timer_sets.push((
                TimerId::BlockTimer {
                    view: msg.view,
                    seq: msg.seq,
                },
                self.cfg.block_timeout,
            ));
        }
        if self.sent_prepare.insert((msg.view, msg.seq)) {
            self.send(
                out,
                self.committee_recipients(),
                msg.view,
                msg.seq,
                msg.digest,
                MessageBody::Prepare,
            );
        }
        // A commit or approval quorum may already be waiting on this block.
        self.try_root_quorum(msg.view, msg.seq, msg.digest, out);
        self.try_global_quorum(msg.view, msg.seq, msg.digest, out);
    }

    fn handle_prepare(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if self.try_buffer_normal(&msg, out) {
            return;
        }
        if !self.is_root_member()
            || msg.view != self.view
            || !self.committee.contains(msg.sender)
        {
            out.note("drop-prepare", format!("{msg:?}"));
            return;
        }
        let key = (msg.view, msg.seq, msg.digest);
        self.prepare_votes
            .entry(key)
            .or_default()
            .entry(msg.sender)
            .or_insert(msg.clone());

        let count = self.prepare_votes[&key].len();
        if count >= self.root_threshold()
            && !self.tainted.contains(&(msg.view, msg.seq))
            && self.sent_commit.insert((msg.view, msg.seq))
        {
            self.send(
                out,
                self.committee_recipients(),
                msg.view,
                msg.seq,
                msg.digest,
                MessageBody::Commit,
            );
        }
    }

    fn handle_commit(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if self.try_buffer_normal(&msg, out) {
            return;
        }
        if !self.is_root_member()
            || msg.view != self.view
            || !self.committee.contains(msg.sender)
        {
            out.note("drop-commit", format!("{msg:?}"));
            return;
        }
        let key = (msg.view, msg.seq, msg.digest);
        self.commit_votes
            .entry(key)
            .or_default()
            .entry(msg.sender)
            .or_insert(msg.clone());
        self.try_root_quorum(msg.view, msg.seq, msg.digest, out);
    }

    /// On a commit quorum: assemble the proposal certificate and broadcast
    /// the block to every replica, once per epoch.
    fn try_root_quorum(&mut self, view: u64, seq: u64, digest: Digest, out: &mut StepOutput) {
        if self.mode != Mode::Normal || self.sent_proposal.contains(&(view, seq)) {
            return;
        }
        let Some(votes) = self.commit_votes.get(&(view, seq, digest)) else {
            return;
        };
        if votes.len() < self.root_threshold() {
            return;
        }
        let Some(block) = self.pending_blocks.get(&(view, seq, digest)).cloned() else {
            // Commit quorum arrived before the block itself; resolved when
            // the pre-prepare lands.
            return;
        };
        let cert = QuorumCertificate {
            kind: ThresholdKind::RootQuorum,
            view,
            seq,
            digest,
            votes: votes
                .values()
                .map(|m| CertVote {
                    signer: m.sender,
                    kind: m.kind(),
                    signature: m.signature,
                })
                .collect(),
        };
        self.sent_proposal.insert((view, seq));
        out.timer_cancels.push(TimerId::BlockTimer { view, seq });
        out.note("root-quorum", format!("seq {seq} {}", digest.short()));
        // The commit signatures seed the global signer set.
        self.seed_approvals(view, seq, digest, &cert);
        self.send(
            out,
            self.all_recipients(),
            view,
            seq,
            digest,
            MessageBody::BlockProposal { block, cert },
        );
        self.try_global_quorum(view, seq, digest, out);
    }

    // ------------------------------------------------------------------
    // Committee-internal sync
    // ------------------------------------------------------------------

    /// A peer announced (via its block timer) that it only holds blocks up
    /// to `msg.seq`; resend the committed blocks past that point, each with
    /// its certificate. At most one response per (peer, tip, view).
    fn handle_timeoutfailure(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        let b_t = msg.seq;
        if !self.sync_served.insert((msg.sender, b_t, msg.view)) {
            out.note("sync-duplicate", format!("{msg:?}"));
            return;
        }
        if b_t >= self.tip_seq() {
            out.note("sync-nothing-missing", format!("{msg:?}"));
            return;
        }
        for seq in (b_t + 1)..=self.tip_seq() {
            let block = self.chain.block_at(seq).cloned();
            let cert = self.chain.cert_at(seq).cloned();
            if let (Some(block), Some(cert)) = (block, cert) {
                let digest = block.digest;
                let view = cert.view;
                self.send(
                    out,
                    vec![msg.sender],
                    view,
                    seq,
                    digest,
                    MessageBody::Confirm {
                        cert,
                        block: Some(block),
                    },
                );
            }
        }
        out.note("sync-served", format!("{:?} from {}", msg.sender, b_t));
    }

    fn on_block_timeout(&mut self, view: u64, seq: u64, out: &mut StepOutput) {
        if self.mode != Mode::Normal
            || view != self.view
            || !self.is_root_member()
            || self.sent_proposal.contains(&(view, seq))
            || seq != self.tip_seq() + 1
        {
            return;
        }
        if !self.sent_timeoutfailure.insert((view, seq)) {
            return;
        }
        out.note("block-timeout", format!("seq {seq}"));
        let recipients: Vec<ReplicaId> = self
            .committee
            .members
            .iter()
            .copied()
            .filter(|&m| m != self.id)
            .collect();
        let tip = self.tip_seq();
        let tip_digest = self.chain.tip_digest();
        self.send(
            out,
            recipients,
            view,
            tip,
            tip_digest,
            MessageBody::TimeoutFailure,
        );
    }

    // ------------------------------------------------------------------
    // Approval path (all replicas, committee members included)
    // ------------------------------------------------------------------

    fn handle_block_proposal(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if self.try_buffer_normal(&msg, out) {
            return;
        }
        if msg.view != self.view {
            out.note("drop-proposal", format!("{msg:?}"));
            return;
        }
        let MessageBody::BlockProposal { block, cert } = &msg.body else {
            return;
        };
        let (block, cert) = (block.clone(), cert.clone());

        // Structural checks and the committee certificate.
        if msg.seq != block.seq
            || msg.view != block.view
            || msg.digest != block.digest
            || !block.digest_consistent()
            || !block.payload.iter().all(Transaction::is_well_formed)
        {
            out.note("bad-hash", format!("{msg:?}"));
            return;
        }
        if cert.kind != ThresholdKind::RootQuorum
            || cert.view != msg.view
            || cert.seq != msg.seq
            || !verify_quorum_cert(
                &cert,
                &block.digest,
                &self.committee,
                self.cfg.f,
                self.cfg.c,
                self.auth.as_ref(),
            )
        {
            out.note("bad-cert", format!("{msg:?}"));
            return;
        }

        // Conflicting valid proposals for one epoch prove committee
        // equivocation: extract a conflict pair from the two certificates.
        if let Some(first) = self.seen_proposal.get(&(msg.view, msg.seq)).cloned() {
            if first.digest != msg.digest {
                self.on_conflicting_proposals(&first, &msg, out);
            }
            return;
        }

        // History checks.
        let next = self.tip_seq() + 1;
        if block.seq < next {
            match self.chain.digest_at(block.seq) {
                Some(d) if d == block.digest => out.note("dup-proposal", format!("{msg:?}")),
                _ => {
                    // A certified proposal conflicting with a committed
                    // block: forward our stored commit certificate as
                    // evidence.
                    out.note("conflict-with-committed", format!("{msg:?}"));
                    self.resend_confirm_for(block.seq, out);
                }
            }
            return;
        }
        if block.seq > next {
            // Keep the block for later; commits may be in flight.
            self.pending_blocks
                .insert((msg.view, msg.seq, msg.digest), block);
            self.seen_proposal.insert((msg.view, msg.seq), msg.clone());
            out.note("proposal-ahead", format!("{msg:?}"));
            self.try_advance_chain(out);
            return;
        }
        if block.prev != self.chain.tip_digest() {
            out.note("bad-prev", format!("{msg:?}"));
            return;
        }

        self.seen_proposal.insert((msg.view, msg.seq), msg.clone());
        self.pending_blocks
            .insert((msg.view, msg.seq, msg.digest), block);
        if self.is_root_member() {
            self.seed_approvals(msg.view, msg.seq, msg.digest, &cert);
        }
        if self.sent_approval.insert((msg.view, msg.seq)) {
            out.timer_cancels.push(TimerId::Epoch {
                view: msg.view,
                seq: msg.seq,
            });
            self.send(
                out,
                self.committee_recipients(),
                msg.view,
                msg.seq,
                msg.digest,
                MessageBody::Approval,
            );
        }
        self.try_global_quorum(msg.view, msg.seq, msg.digest, out);
    }

    fn on_conflicting_proposals(
        &mut self,
        first: &SignedMessage,
        second: &SignedMessage,
        out: &mut StepOutput,
    ) {
        let certs = match (&first.body, &second.body) {
            (
                MessageBody::BlockProposal { cert: c1, .. },
                MessageBody::BlockProposal { cert: c2, .. },
            ) => Some((c1.clone(), c2.clone())),
            _ => None,
        };
        out.note("equivocating-committee", format!("{second:?}"));
        let Some((c1, c2)) = certs else { return };
        let Some((a, b)) = c1.conflicting_votes(&c2) else {
            return;
        };
        let proof = Proof::ConflictPair(Box::new(a), Box::new(b));
        self.evidence.push(proof.clone());
        let view = first.view;
        if !self.proof_broadcast.contains(&view) {
            self.proof_broadcast.insert(view);
            self.send(
                out,
                self.committee_recipients(),
                view,
                first.seq,
                Digest::ZERO,
                MessageBody::MaliciousnessProof { proof },
            );
        }
        self.enter_view_change(view + 1, out);
    }

    fn seed_approvals(&mut self, view: u64, seq: u64, digest: Digest, cert: &QuorumCertificate) {
        let entry = self.approval_votes.entry((view, seq, digest)).or_default();
        for vote in &cert.votes {
            entry.entry(vote.signer).or_insert_with(|| vote.clone());
        }
    }

    fn handle_approval(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if self.try_buffer_normal(&msg, out) {
            return;
        }
        if !self.is_root_member() || msg.view != self.view {
            out.note("drop-approval", format!("{msg:?}"));
            return;
        }
        match self.seen_proposal.get(&(msg.view, msg.seq)) {
            Some(p) if p.digest != msg.digest => {
                out.note("approval-unknown-digest", format!("{msg:?}"));
            }
            _ => {}
        }
        self.approval_votes
            .entry((msg.view, msg.seq, msg.digest))
            .or_default()
            .entry(msg.sender)
            .or_insert(CertVote {
                signer: msg.sender,
                kind: MessageKind::Approval,
                signature: msg.signature,
            });
        self.try_global_quorum(msg.view, msg.seq, msg.digest, out);
    }

    /// On 2f+1 distinct signers (committee commits plus approvals): commit
    /// locally and broadcast the confirm carrying the global certificate.
    fn try_global_quorum(&mut self, view: u64, seq: u64, digest: Digest, out: &mut StepOutput) {
        if self.mode != Mode::Normal
            || !self.is_root_member()
            || self.sent_confirm.contains(&(view, seq))
        {
            return;
        }
        let Some(votes) = self.approval_votes.get(&(view, seq, digest)) else {
            return;
        };
        if votes.len() < self.global_threshold() {
            return;
        }
        let Some(block) = self.pending_blocks.get(&(view, seq, digest)).cloned() else {
            return;
        };
        let cert = QuorumCertificate {
            kind: ThresholdKind::GlobalQuorum,
            view,
            seq,
            digest,
            votes: votes.values().cloned().collect(),
        };
        self.sent_confirm.insert((view, seq));
        out.note("global-quorum", format!("seq {seq} {}", digest.short()));
        self.send(
            out,
            self.all_recipients(),
            view,
            seq,
            digest,
            MessageBody::Confirm {
                cert: cert.clone(),
                block: None,
            },
        );
        self.integrate_cert(Some(block), cert, None, out);
    }

    // ------------------------------------------------------------------
    // Commit path
    // ------------------------------------------------------------------

    fn handle_confirm(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        let MessageBody::Confirm { cert, block } = &msg.body else {
            return;
        };
        let (cert, block) = (cert.clone(), block.clone());
        if cert.kind != ThresholdKind::GlobalQuorum
            || cert.seq != msg.seq
            || cert.digest != msg.digest
            || !verify_quorum_cert(
                &cert,
                &cert.digest.clone(),
                &self.committee,
                self.cfg.f,
                self.cfg.c,
                self.auth.as_ref(),
            )
        {
            out.note("bad-cert", format!("{msg:?}"));
            return;
        }
        if let Some(b) = &block {
            if b.digest != cert.digest || b.seq != cert.seq || !b.digest_consistent() {
                out.note("bad-sync-block", format!("{msg:?}"));
                return;
            }
        }
        self.integrate_cert(block, cert, Some(msg.sender), out);
    }

    /// Universal commit integration: accepts a verified global certificate
    /// (with or without its block), buffers out-of-order arrivals, and
    /// advances the chain as far as possible. Active in every mode.
    pub(crate) fn integrate_cert(
        &mut self,
        block: Option<Block>,
        cert: QuorumCertificate,
        holder: Option<ReplicaId>,
        out: &mut StepOutput,
    ) {
        let seq = cert.seq;
        if seq <= self.tip_seq() {
            if self.chain.digest_at(seq) != Some(cert.digest) {
                out.note(
                    "conflicting-cert",
                    format!("seq {seq} {}", cert.digest.short()),
                );
            }
            return;
        }
        match self.pending_certs.entry(seq) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert((cert, block));
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                if e.get().1.is_none() && block.is_some() {
                    e.get_mut().1 = block;
                }
            }
        }
        // A gap we cannot bridge from local state needs the holder's help.
        if seq > self.tip_seq() + 1 {
            if let Some(holder) = holder {
                self.request_sync(holder, out);
            }
        }
        self.try_advance_chain(out);
    }

    /// Appends every pending certificate whose block is available and whose
    /// sequence number is next.
    pub(crate) fn try_advance_chain(&mut self, out: &mut StepOutput) {
        loop {
            let next = self.tip_seq() + 1;
            let Some((cert, stored_block)) = self.pending_certs.get(&next) else {
                break;
            };
            let block = stored_block.clone().or_else(|| {
                self.pending_blocks
                    .get(&(cert.view, next, cert.digest))
                    .cloned()
            });
            let Some(block) = block else {
                break;
            };
            let cert = cert.clone();
            let result = self.chain.append(
                block.clone(),
                cert.clone(),
                &self.committee,
                self.cfg.f,
                self.cfg.c,
                self.auth.as_ref(),
            );
            match result {
                Ok(()) => {
                    self.pending_certs.remove(&next);
                    out.timer_cancels.push(TimerId::Epoch {
                        view: self.view,
                        seq: next,
                    });
                    out.committed.push((block, cert));
                    self.after_append(out);
                }
                Err(err) => {
                    out.note("append-failed", format!("seq {next}: {err}"));
                    self.pending_certs.remove(&next);
                    break;
                }
            }
        }
    }

    fn after_append(&mut self, out: &mut StepOutput) {
        let tip = self.tip_seq();
        // Drop bookkeeping for settled epochs.
        self.prune_below_seq(tip);
        match self.mode {
            Mode::Normal => {
                // Expect the next epoch.
                out.timer_sets.push((
                    TimerId::Epoch {
                        view: self.view,
                        seq: tip + 1,
                    },
                    self.cfg.epoch_timeout,
                ));
                // A primary whose in-flight epoch was overtaken restarts on
                // the new tip (the harness drives the next proposal).
                if let Some((v, s)) = self.inflight {
                    if v == self.view && s <= tip {
                        self.inflight = None;
                    }
                }
            }
            Mode::ViewChange => {
                self.vc_on_chain_growth(out);
            }
        }
    }

    fn prune_below_seq(&mut self, tip: u64) {
        self.prepare_votes.retain(|&(_, s, _), _| s > tip);
        self.commit_votes.retain(|&(_, s, _), _| s > tip);
        self.approval_votes.retain(|&(_, s, _), _| s > tip);
        self.pending_blocks.retain(|&(_, s, _), _| s > tip);
        self.seen_preprepare.retain(|&(_, s), _| s > tip);
        self.seen_proposal.retain(|&(_, s), _| s > tip);
    }

    /// Re-sends the stored confirm (certificate plus block) for a committed
    /// sequence number to the current committee.
    fn resend_confirm_for(&mut self, seq: u64, out: &mut StepOutput) {
        let block = self.chain.block_at(seq).cloned();
        let cert = self.chain.cert_at(seq).cloned();
        if let (Some(block), Some(cert)) = (block, cert) {
            let digest = block.digest;
            let view = cert.view;
            self.send(
                out,
                self.committee_recipients(),
                view,
                seq,
                digest,
                MessageBody::Confirm {
                    cert,
                    block: Some(block),
                },
            );
        }
    }

    /// Asks `target` for the blocks after our tip.
    pub(crate) fn request_sync(&mut self, target: ReplicaId, out: &mut StepOutput) {
        if target == self.id || !self.vc.sync_asked.insert(target) {
            return;
        }
        let tip = self.tip_seq();
        let tip_digest = self.chain.tip_digest();
        self.send(
            out,
            vec![target],
            self.view,
            tip,
            tip_digest,
            MessageBody::TimeoutFailure,
        );
    }

    // ------------------------------------------------------------------
    // Timeouts and complaints
    // ------------------------------------------------------------------

    fn on_epoch_timeout(&mut self, view: u64, seq: u64, out: &mut StepOutput) {
        if self.mode != Mode::Normal
            || view != self.view
            || seq != self.tip_seq() + 1
            || self.sent_approval.contains(&(view, seq))
        {
            return;
        }
        if !self.sent_complaint.insert((view, seq)) {
            return;
        }
        out.note("epoch-timeout", format!("seq {seq} view {view}"));
        self.send(
            out,
            self.committee_recipients(),
            view,
            seq,
            Digest::ZERO,
            MessageBody::TimeoutComplaint,
        );
    }

    fn handle_timeout_complaint(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view < self.view {
            out.note("stale-complaint", format!("{msg:?}"));
            return;
        }
        // Complaints are addressed to the committee of their view; views
        // ahead of ours occur when we have not joined a view change yet.
        let member_of_target = if msg.view == self.view {
            self.is_root_member()
        } else {
            select_committee(&self.cfg.committee_seed, msg.view, self.cfg.n, self.cfg.c)
                .map(|sel| sel.contains(self.id))
                .unwrap_or(false)
        };
        if !member_of_target {
            return;
        }
        let tip = self.chain.tip_seq();
        let entry = self.complaints.entry(msg.view).or_default();
        entry.entry(msg.sender).or_insert(msg.clone());
        // Complaints about epochs that have since committed are lag, not
        // committee failure; only live grievances count toward f+1.
        entry.retain(|_, m| m.seq > tip);
        let count = self.complaints[&msg.view].len();
        if count >= self.cfg.f as usize + 1 && !self.proof_broadcast.contains(&msg.view) {
            self.proof_broadcast.insert(msg.view);
            let set: Vec<SignedMessage> = self.complaints[&msg.view]
                .values()
                .take(self.cfg.f as usize + 1)
                .cloned()
                .collect();
            let proof = Proof::ComplaintSet(set);
            out.note("complaint-quorum", format!("view {}", msg.view));
            let target_view = msg.view;
            self.send(
                out,
                self.all_recipients(),
                target_view,
                msg.seq,
                Digest::ZERO,
                MessageBody::MaliciousnessProof { proof },
            );
            self.enter_view_change(target_view + 1, out);
        }
    }

    fn handle_maliciousness_proof(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        let MessageBody::MaliciousnessProof { proof } = &msg.body else {
            return;
        };
        let proof = proof.clone();
        if !proof.verify(self.auth.as_ref(), self.cfg.f) {
            out.note("invalid-proof", format!("{msg:?}"));
            return;
        }
        let target = proof.view();
        if target < self.view {
            out.note("stale-proof", format!("{msg:?}"));
            return;
        }
        // A complaint set needs f+1 distinct signers, hence at least one
        // correct one, so it may vouch for views ahead of ours; a conflict
        // pair is forgeable by a single Byzantine signer and is only
        // accepted for the current view.
        if target > self.view && matches!(proof, Proof::ConflictPair(..)) {
            out.note("future-conflict-proof", format!("{msg:?}"));
            return;
        }
        if target == self.view && self.mode == Mode::ViewChange {
            return;
        }
        self.evidence.push(proof.clone());
        // Committee members relay valid proofs to everyone, once per view.
        if self.is_root_member() && self.proof_broadcast.insert(target) {
            self.send(
                out,
                self.all_recipients(),
                target,
                msg.seq,
                Digest::ZERO,
                MessageBody::MaliciousnessProof { proof },
            );
        }
        self.enter_view_change(target + 1, out);
    }
}
