//! Whole-committee view change.
//!
//! On a maliciousness proof every replica advances to the next view, selects
//! the replacement committee from the shared seed, and sends its local
//! history summary (tip plus commit certificate) to the new members. The new
//! committee aggregates 2f+1 summaries into a history quorum Q, replicas
//! answer with READY, and a quorum P of 2f+1 distinct readies completes the
//! change and re-enters normal mode on the agreed tip.
//!
//! Summaries carry verifiable certificates, so the agreed tip is taken as
//! the highest certified tip seen once the 2f+1 agreement gate is met. A
//! replica that learns of newer committed blocks mid-change re-issues its
//! summary and ready, and quorums are re-broadcast monotonically, so all
//! correct replicas converge on the highest certified history.

use crate::message::{MessageBody, MessageKind, SignedMessage};
use crate::quorum::{global_quorum_threshold, verify_quorum_cert, ThresholdKind};
use crate::replica::{Mode, Replica, StepOutput, TimerId, VcState};
use crate::types::{Digest, ReplicaId};

/// A claimed chain tip: sequence number and block digest.
pub(crate) type Tip = (u64, Digest);

impl Replica {
    // ------------------------------------------------------------------
    // Entry
    // ------------------------------------------------------------------

    /// Moves this replica into the view change establishing `new_view`:
    /// select the replacement committee, broadcast the local history
    /// summary, and start the view-change timer.
    pub(crate) fn enter_view_change(&mut self, new_view: u64, out: &mut StepOutput) {
        if new_view <= self.view {
            return;
        }
        let old_view = self.view;
        self.view = new_view;
        self.mode = Mode::ViewChange;
        self.committee = crate::committee::select_committee(
            &self.cfg.committee_seed,
            new_view,
            self.cfg.n,
            self.cfg.c,
        )
        .expect("committee parameters validated at construction");
        self.vc = VcState {
            summarized_tip: self.tip_seq(),
            ..VcState::default()
        };
        self.inflight = None;
        self.buffered_normal.retain(|m| m.view >= new_view);

        // Dead bookkeeping from abandoned views.
        self.prepare_votes.retain(|&(v, _, _), _| v >= new_view);
        self.commit_votes.retain(|&(v, _, _), _| v >= new_view);
        self.approval_votes.retain(|&(v, _, _), _| v >= new_view);
        self.seen_proposal.retain(|&(v, _), _| v >= new_view);
        self.complaints.retain(|&v, _| v >= new_view);

        out.entered_view = Some(new_view);
        out.note("vc-start", format!("view {old_view} -> {new_view}"));
        out.timer_cancels.push(TimerId::Epoch {
            view: old_view,
            seq: self.tip_seq() + 1,
        });
        out.timer_cancels.push(TimerId::BlockTimer {
            view: old_view,
            seq: self.tip_seq() + 1,
        });
        out.timer_sets.push((
            TimerId::ViewChangeTimer { view: new_view },
            self.cfg.epoch_timeout,
        ));

        self.broadcast_summary(out);

        // Summaries that arrived before we joined this view.
        if let Some(buffered) = self.buffered_summaries.remove(&new_view) {
            for msg in buffered {
                self.vc_handle_summary(msg, out);
            }
        }
        self.buffered_summaries.retain(|&v, _| v > new_view);
    }

    /// Sends this replica's history summary for the current view to the new
    /// committee: tip seq, tip digest, and the certificate proving the tip
    /// (absent at genesis, which every replica knows).
    fn broadcast_summary(&mut self, out: &mut StepOutput) {
        let tip_seq = self.tip_seq();
        let tip_digest = self.chain.tip_digest();
        let tip_cert = self.chain.tip_cert().cloned();
        self.vc.summarized_tip = tip_seq;
        let recipients = self.committee.members.clone();
        self.send(
            out,
            recipients,
            self.view,
            tip_seq,
            tip_digest,
            MessageBody::ViewChange { tip_cert },
        );
    }

    /// Structural validity of a history summary for this replica's view.
    fn summary_valid(&self, msg: &SignedMessage) -> bool {
        let MessageBody::ViewChange { tip_cert } = &msg.body else {
            return false;
        };
        if msg.seq == 0 {
            return msg.digest == self.chain.genesis().digest && tip_cert.is_none();
        }
        let Some(cert) = tip_cert else { return false };
        cert.kind == ThresholdKind::GlobalQuorum
            && cert.seq == msg.seq
            && cert.digest == msg.digest
            && cert.votes.len() >= global_quorum_threshold(self.cfg.f)
            && verify_quorum_cert(
                cert,
                &msg.digest,
                &self.committee,
                self.cfg.f,
                self.cfg.c,
                self.auth.as_ref(),
            )
    }

    // ------------------------------------------------------------------
    // History aggregation (new committee members)
    // ------------------------------------------------------------------

    pub(crate) fn vc_handle_summary(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view < self.view {
            out.note("stale-summary", format!("{msg:?}"));
            return;
        }
        if msg.view > self.view {
            // A lone summary is not evidence enough to change views; hold it
            // until a proof or quorum moves us.
            let buf = self.buffered_summaries.entry(msg.view).or_default();
            if buf.len() < self.cfg.n as usize * 2 {
                buf.push(msg);
            }
            return;
        }
        if !self.summary_valid(&msg) {
            out.note("invalid-summary", format!("{msg:?}"));
            return;
        }
        if self.mode == Mode::Normal {
            // This view change already completed here; help the laggard.
            if let Some(q) = self.last_q.clone() {
                out.messages.push(crate::replica::OutboundMessage {
                    recipients: vec![msg.sender],
                    message: q,
                    extra_delay: 0,
                });
            }
            if let Some(p) = self.last_p.clone() {
                out.messages.push(crate::replica::OutboundMessage {
                    recipients: vec![msg.sender],
                    message: p,
                    extra_delay: 0,
                });
            }
            return;
        }
        if !self.is_root_member() {
            return;
        }
        // Keep the highest-tip summary per sender; a replica that commits
        // mid-change legitimately re-summarizes.
        let entry = self.vc.summaries.entry(msg.sender);
        use std::collections::btree_map::Entry;
        match entry {
            Entry::Vacant(e) => {
                e.insert(msg);
            }
            Entry::Occupied(mut e) => {
                if msg.seq > e.get().seq {
                    e.insert(msg);
                }
            }
        }
        self.evaluate_history_quorum(out);
    }

    /// Forms and broadcasts Q once 2f+1 distinct senders are in hand and at
    /// least 2f+1 of them agree on one tip. The agreed tip is the highest
    /// certified tip known, which is at least the agreement tip.
    fn evaluate_history_quorum(&mut self, out: &mut StepOutput) {
        let threshold = global_quorum_threshold(self.cfg.f);
        if self.vc.summaries.len() < threshold {
            return;
        }
        let mut tally: std::collections::BTreeMap<Tip, usize> = std::collections::BTreeMap::new();
        let mut best_cert: Option<Tip> = None;
        for s in self.vc.summaries.values() {
            let tip = (s.seq, s.digest);
            *tally.entry(tip).or_default() += 1;
            if best_cert.map_or(true, |(bs, _)| s.seq > bs) {
                best_cert = Some(tip);
            }
        }
        let Some(quorum_tip) = tally
            .iter()
            .find(|(_, &count)| count >= threshold)
            .map(|(&tip, _)| tip)
        else {
            return;
        };
        let agreed = match best_cert {
            Some(cert_tip) if cert_tip.0 > quorum_tip.0 => cert_tip,
            _ => quorum_tip,
        };
        if !self.vc.q_broadcast.insert(agreed) {
            return;
        }
        self.merge_best_q(agreed);
        let entries: Vec<SignedMessage> = self.vc.summaries.values().cloned().collect();
        out.note(
            "vc-q",
            format!("view {} tip ({}, {})", self.view, agreed.0, agreed.1.short()),
        );
        let view = self.view;
        self.send(
            out,
            self.all_recipients_vc(),
            view,
            agreed.0,
            agreed.1,
            MessageBody::HistoryQuorum { entries },
        );
        if let Some(last) = out.messages.last() {
            self.last_q = Some(last.message.clone());
        }
    }

    fn all_recipients_vc(&self) -> Vec<ReplicaId> {
        (0..self.cfg.n).map(ReplicaId).collect()
    }

    fn merge_best_q(&mut self, tip: Tip) {
        if self.vc.best_q.map_or(true, |(s, _)| tip.0 > s) {
            self.vc.best_q = Some(tip);
        }
    }

    /// Validates a history quorum: 2f+1 distinct valid summaries, and an
    /// agreed tip backed either by 2f+1 matching entries or by a certified
    /// entry at that tip.
    fn quorum_valid(&self, msg: &SignedMessage) -> bool {
        let MessageBody::HistoryQuorum { entries } = &msg.body else {
            return false;
        };
        let threshold = global_quorum_threshold(self.cfg.f);
        let mut senders = std::collections::BTreeSet::new();
        let mut agreement = 0usize;
        let mut cert_backed = false;
        for e in entries {
            if e.kind() != MessageKind::ViewChange
                || e.view != msg.view
                || !e.verify(self.auth.as_ref())
                || !self.summary_valid(e)
                || !senders.insert(e.sender)
            {
                return false;
            }
            if (e.seq, e.digest) == (msg.seq, msg.digest) {
                agreement += 1;
                cert_backed = true;
            }
        }
        senders.len() >= threshold && (agreement >= threshold || cert_backed)
    }

    // ------------------------------------------------------------------
    // Ready round
    // ------------------------------------------------------------------

    pub(crate) fn vc_handle_quorum(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view < self.view {
            out.note("stale-q", format!("{msg:?}"));
            return;
        }
        if !self.quorum_valid(&msg) {
            out.note("invalid-q", format!("{msg:?}"));
            return;
        }
        if msg.view > self.view {
            // 2f+1 summaries prove at least f+1 correct replicas joined this
            // view change; join it.
            self.enter_view_change(msg.view, out);
        }
        if self.mode == Mode::Normal {
            return;
        }
        let agreed: Tip = (msg.seq, msg.digest);
        self.merge_best_q(agreed);
        if self.tip_seq() < agreed.0 {
            // Fetch the missing blocks from replicas that claim them.
            let mut targets: Vec<ReplicaId> = vec![msg.sender];
            if let MessageBody::HistoryQuorum { entries } = &msg.body {
                for e in entries {
                    if e.seq >= agreed.0 && targets.len() <= self.cfg.f as usize + 1 {
                        targets.push(e.sender);
                    }
                }
            }
            for t in targets {
                self.request_sync(t, out);
            }
            return;
        }
        self.send_ready(agreed, out);
    }

    fn send_ready(&mut self, tip: Tip, out: &mut StepOutput) {
        if self.tip_seq() < tip.0 {
            return;
        }
        if self.chain.digest_at(tip.0) != Some(tip.1) {
            out.note("agreed-conflicts-chain", format!("tip ({}, {})", tip.0, tip.1.short()));
            return;
        }
        if self.vc.ready_sent.map_or(false, |(s, _)| s >= tip.0) {
            return;
        }
        self.vc.ready_sent = Some(tip);
        let view = self.view;
        let recipients = self.committee.members.clone();
        self.send(out, recipients, view, tip.0, tip.1, MessageBody::Ready);
    }

    pub(crate) fn vc_handle_ready(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view != self.view || self.mode != Mode::ViewChange || !self.is_root_member() {
            out.note("drop-ready", format!("{msg:?}"));
            return;
        }
        let tip: Tip = (msg.seq, msg.digest);
        self.vc
            .readies
            .entry(tip)
            .or_default()
            .entry(msg.sender)
            .or_insert(msg);
        self.try_ready_quorum(tip, out);
    }

    fn try_ready_quorum(&mut self, tip: Tip, out: &mut StepOutput) {
        let threshold = global_quorum_threshold(self.cfg.f);
        let Some(readies) = self.vc.readies.get(&tip) else {
            return;
        };
        if readies.len() < threshold {
            return;
        }
        // Never endorse a tip below the best certified knowledge; replicas
        // that readied the lower tip will upgrade from the higher Q already
        // in flight.
        if self.vc.best_q.map_or(false, |(s, _)| s > tip.0) {
            out.note("ready-quorum-superseded", format!("tip seq {}", tip.0));
            return;
        }
        if self.tip_seq() < tip.0 {
            return;
        }
        if !self.vc.p_broadcast.insert(tip) {
            return;
        }
        let readies: Vec<SignedMessage> = readies.values().cloned().collect();
        out.note(
            "vc-p",
            format!("view {} tip ({}, {})", self.view, tip.0, tip.1.short()),
        );
        let view = self.view;
        self.send(
            out,
            self.all_recipients_vc(),
            view,
            tip.0,
            tip.1,
            MessageBody::ReadyQuorum { readies },
        );
        if let Some(last) = out.messages.last() {
            self.last_p = Some(last.message.clone());
        }
        self.complete_view_change(tip, out);
    }

    fn ready_quorum_valid(&self, msg: &SignedMessage) -> bool {
        let MessageBody::ReadyQuorum { readies } = &msg.body else {
            return false;
        };
        let mut senders = std::collections::BTreeSet::new();
        for r in readies {
            if r.kind() != MessageKind::Ready
                || r.view != msg.view
                || (r.seq, r.digest) != (msg.seq, msg.digest)
                || !r.verify(self.auth.as_ref())
                || !senders.insert(r.sender)
            {
                return false;
            }
        }
        senders.len() >= global_quorum_threshold(self.cfg.f)
    }

    pub(crate) fn vc_handle_ready_quorum(&mut self, msg: SignedMessage, out: &mut StepOutput) {
        if msg.view < self.view {
            out.note("stale-p", format!("{msg:?}"));
            return;
        }
        if !self.ready_quorum_valid(&msg) {
            out.note("invalid-p", format!("{msg:?}"));
            return;
        }
        if msg.view > self.view {
            self.enter_view_change(msg.view, out);
        }
        if self.mode == Mode::Normal {
            return;
        }
        let tip: Tip = (msg.seq, msg.digest);
        if self.tip_seq() < tip.0 {
            let sender = msg.sender;
            self.vc.pending_p = Some(msg);
            self.request_sync(sender, out);
            return;
        }
        if self.chain.digest_at(tip.0) != Some(tip.1) {
            out.note("p-conflicts-chain", format!("tip ({}, {})", tip.0, tip.1.short()));
        }
        self.complete_view_change(tip, out);
    }

    /// Back to normal mode in the established view: reset timers and expect
    /// the next epoch on the agreed history.
    fn complete_view_change(&mut self, tip: Tip, out: &mut StepOutput) {
        if self.mode != Mode::ViewChange {
            return;
        }
        self.mode = Mode::Normal;
        out.completed_view = Some(self.view);
        out.note(
            "vc-done",
            format!("view {} tip ({}, {})", self.view, tip.0, tip.1.short()),
        );
        out.timer_cancels
            .push(TimerId::ViewChangeTimer { view: self.view });
        out.timer_sets.push((
            TimerId::Epoch {
                view: self.view,
                seq: self.tip_seq() + 1,
            },
            self.cfg.epoch_timeout,
        ));
        // Traffic for this view that arrived while we were still changing.
        let buffered = std::mem::take(&mut self.buffered_normal);
        for msg in buffered {
            let mut sub = StepOutput::default();
            self.dispatch_buffered(msg, &mut sub);
            out.merge(sub);
        }
    }

    /// Chain growth while a view change is running: re-issue the summary for
    /// the higher tip, upgrade the ready, re-check ready quorums and any
    /// buffered ready quorum.
    pub(crate) fn vc_on_chain_growth(&mut self, out: &mut StepOutput) {
        if self.mode != Mode::ViewChange {
            return;
        }
        if self.tip_seq() > self.vc.summarized_tip {
            self.broadcast_summary(out);
        }
        if let Some(best) = self.vc.best_q {
            self.send_ready(best, out);
        }
        if self.is_root_member() {
            let candidates: Vec<Tip> = self.vc.readies.keys().copied().collect();
            for tip in candidates {
                if self.mode != Mode::ViewChange {
                    break;
                }
                self.try_ready_quorum(tip, out);
            }
        }
        if let Some(p) = self.vc.pending_p.take() {
            if self.tip_seq() >= p.seq {
                let tip: Tip = (p.seq, p.digest);
                self.complete_view_change(tip, out);
            } else {
                self.vc.pending_p = Some(p);
            }
        }
    }

    /// The established view failed to complete its change in time: complain
    /// to the new committee, which escalates to the next view on f+1
    /// complaints.
    pub(crate) fn on_view_change_timeout(&mut self, view: u64, out: &mut StepOutput) {
        if self.mode != Mode::ViewChange || self.view != view {
            return;
        }
        let seq = self.tip_seq() + 1;
        if !self.sent_complaint.insert((view, seq)) {
            return;
        }
        out.note("vc-timeout", format!("view {view}"));
        let recipients = self.committee.members.clone();
        self.send(
            out,
            recipients,
            view,
            seq,
            Digest::ZERO,
            MessageBody::TimeoutComplaint,
        );
    }

}

#[cfg(test)]
mod tests;
