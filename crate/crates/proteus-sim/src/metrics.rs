//! Run measurements: per-epoch latency, message counters by kind and phase,
//! view changes and chain tips. All maps are ordered so serialized metrics
//! are byte-stable.

use std::collections::BTreeMap;

use proteus_core::MessageKind;
use serde::Serialize;

/// Which leg of the protocol a message belongs to, keyed purely by kind.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    /// Traffic inside the root committee.
    CommitteeInternal,
    /// Traffic between the committee and regular replicas.
    CommitteeRegular,
    /// View-change rounds.
    ViewChange,
}

pub fn phase_of(kind: MessageKind) -> Phase {
    match kind {
        MessageKind::PrePrepare
        | MessageKind::Prepare
        | MessageKind::Commit
        | MessageKind::TimeoutFailure => Phase::CommitteeInternal,
        MessageKind::BlockProposal
        | MessageKind::Approval
        | MessageKind::Confirm
        | MessageKind::TimeoutComplaint
        | MessageKind::MaliciousnessProof => Phase::CommitteeRegular,
        MessageKind::ViewChange
        | MessageKind::HistoryQuorum
        | MessageKind::Ready
        | MessageKind::ReadyQuorum => Phase::ViewChange,
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PhaseCounts {
    pub committee_internal: u64,
    pub committee_regular: u64,
    pub view_change: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub seq: u64,
    /// Tick of the first proposal attempt for this sequence number.
    pub proposed_tick: u64,
    /// Tick at which the last correct replica committed it.
    pub committed_tick: u64,
    pub latency_ticks: u64,
    /// One-way message stages from proposal to the last correct commit.
    pub commit_depth: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub schema: u32,
    pub protocol: String,
    pub n: u32,
    pub f: u32,
    pub c: u32,
    pub block_size: u32,
    pub seed: String,
    pub epochs_target: u64,
    /// Epochs committed by every correct replica.
    pub committed_epochs: u64,
    pub committed_txs: u64,
    pub total_ticks: u64,
    /// Highest view any correct replica entered.
    pub view_changes: u64,
    pub per_epoch: Vec<EpochRecord>,
    pub messages_by_kind: BTreeMap<String, u64>,
    pub phases: PhaseCounts,
    pub self_sends: u64,
    pub retransmissions: u64,
    pub per_replica_tips: Vec<u64>,
}

impl RunMetrics {
    pub fn new(protocol: &str, n: u32, f: u32, c: u32, block_size: u32, seed: &str) -> RunMetrics {
        RunMetrics {
            schema: 1,
            protocol: protocol.to_string(),
            n,
            f,
            c,
            block_size,
            seed: seed.to_string(),
            epochs_target: 0,
            committed_epochs: 0,
            committed_txs: 0,
            total_ticks: 0,
            view_changes: 0,
            per_epoch: Vec::new(),
            messages_by_kind: BTreeMap::new(),
            phases: PhaseCounts::default(),
            self_sends: 0,
            retransmissions: 0,
            per_replica_tips: Vec::new(),
        }
    }

    pub fn record_send(&mut self, kind: MessageKind) {
        *self
            .messages_by_kind
            .entry(kind.name().to_string())
            .or_default() += 1;
        match phase_of(kind) {
            Phase::CommitteeInternal => self.phases.committee_internal += 1,
            Phase::CommitteeRegular => self.phases.committee_regular += 1,
            Phase::ViewChange => self.phases.view_change += 1,
        }
    }

    pub fn count_messages(&self, phase: Phase) -> u64 {
        match phase {
            Phase::CommitteeInternal => self.phases.committee_internal,
            Phase::CommitteeRegular => self.phases.committee_regular,
            Phase::ViewChange => self.phases.view_change,
        }
    }

    pub fn total_messages(&self) -> u64 {
        self.messages_by_kind.values().sum()
    }

    pub fn normal_mode_messages(&self) -> u64 {
        self.phases.committee_internal + self.phases.committee_regular
    }

    pub fn messages_per_epoch(&self) -> f64 {
        if self.committed_epochs == 0 {
            return 0.0;
        }
        self.normal_mode_messages() as f64 / self.committed_epochs as f64
    }

    pub fn median_epoch_latency(&self) -> u64 {
        let mut latencies: Vec<u64> = self.per_epoch.iter().map(|e| e.latency_ticks).collect();
        if latencies.is_empty() {
            return 0;
        }
        latencies.sort_unstable();
        latencies[latencies.len() / 2]
    }

    pub fn committed_tx_per_10k_ticks(&self) -> f64 {
        if self.total_ticks == 0 {
            return 0.0;
        }
        self.committed_txs as f64 * 10_000.0 / self.total_ticks as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
