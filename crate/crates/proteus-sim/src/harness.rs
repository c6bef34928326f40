//! The simulation driver: seeded message scheduling over the event queue,
//! timer service with cancellation generations, adversary wrapping, message
//! accounting, the global safety monitor, and epoch latency measurement.
//!
//! A run is a pure function of its config: the network RNG is keyed by the
//! config seed, all replica state is deterministic, and the queue imposes a
//! total order on events. Dropped copies are rescheduled after a
//! retransmission timeout, so every message between correct replicas is
//! eventually delivered.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proteus_core::adversary::{apply_strategy, AdversaryError, AdversaryStrategy};
use proteus_core::pbft::PbftReplica;
use proteus_core::replica::{
    Mode, OutboundMessage, Replica, ReplicaConfig, ReplicaEvent, StepOutput, TimerId,
};
use proteus_core::{Digest, KeyedDigestAuth, MessageBody, MessageKind, ReplicaId, Transaction};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, Protocol, SimulationConfig};
use crate::metrics::RunMetrics;
use crate::queue::{EventQueue, Payload};
use crate::trace::Trace;

#[derive(Error, Debug)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("safety violation: replicas {a} and {b} committed different blocks at seq {seq}")]
    SafetyViolation { seq: u64, a: u32, b: u32 },
    #[error("once-only violation: replica {replica} double-voted {kind} at (v{view}, s{seq})")]
    DoubleVote {
        replica: u32,
        kind: &'static str,
        view: u64,
        seq: u64,
    },
    #[error("chain validation failed on replica {replica}: {detail}")]
    BadChain { replica: u32, detail: String },
    #[error(transparent)]
    Forgery(#[from] AdversaryError),
}

pub struct SimOutcome {
    pub metrics: RunMetrics,
    pub trace: Option<String>,
}

enum Engine {
    Proteus(Box<Replica>),
    Pbft(Box<PbftReplica>),
}

impl Engine {
    fn step(&mut self, event: ReplicaEvent) -> StepOutput {
        match self {
            Engine::Proteus(r) => r.step(event),
            Engine::Pbft(r) => r.step(event),
        }
    }

    fn tip_seq(&self) -> u64 {
        match self {
            Engine::Proteus(r) => r.tip_seq(),
            Engine::Pbft(r) => r.tip_seq(),
        }
    }

    fn chain(&self) -> &proteus_core::Chain {
        match self {
            Engine::Proteus(r) => r.chain(),
            Engine::Pbft(r) => r.chain(),
        }
    }

    fn view(&self) -> u64 {
        match self {
            Engine::Proteus(r) => r.view(),
            Engine::Pbft(_) => 0,
        }
    }

    fn proteus(&self) -> Option<&Replica> {
        match self {
            Engine::Proteus(r) => Some(r),
            Engine::Pbft(_) => None,
        }
    }
}

/// Synthetic transfer record. Keyed by sequence number only, so the payload
/// a failed view discarded is re-proposed intact in the next view.
pub fn transactions_for(seed: &str, seq: u64, block_size: u32) -> Vec<Transaction> {
    (0..block_size)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(b"tx");
            h.update(seed.as_bytes());
            h.update(seq.to_le_bytes());
            h.update(i.to_le_bytes());
            let d = h.finalize();
            let from = u32::from_le_bytes([d[0], d[1], d[2], d[3]]);
            let to = u32::from_le_bytes([d[4], d[5], d[6], d[7]]);
            let amount = u16::from_le_bytes([d[8], d[9]]);
            Transaction(format!("xfer {from:08x}->{to:08x} amt {amount}").into_bytes())
        })
        .collect()
}

struct CommitInfo {
    tick: u64,
    depth: u32,
}

pub struct Simulation {
    cfg: SimulationConfig,
    f: u32,
    engines: Vec<Engine>,
    strategies: Vec<AdversaryStrategy>,
    queue: EventQueue,
    net_rng: ChaCha20Rng,
    metrics: RunMetrics,
    trace: Trace,
    tick: u64,
    timer_generations: BTreeMap<(u32, TimerId), u64>,
    /// First global commit per seq, for the conflict monitor.
    registry: BTreeMap<u64, (u32, Digest)>,
    /// Commit tick and stage depth per (seq, correct replica).
    commits: BTreeMap<u64, BTreeMap<u32, CommitInfo>>,
    proposal_ticks: BTreeMap<u64, u64>,
    /// (replica, kind, view, seq) votes already seen from correct replicas.
    vote_monitor: BTreeSet<(u32, u8, u64, u64)>,
    done_at: Option<u64>,
}

impl Simulation {
    pub fn new(config: &SimulationConfig) -> Result<Simulation, SimError> {
        config.validate()?;
        let f = config.resolved_f();
        let strategies = config.strategies()?;
        let auth = KeyedDigestAuth::shared(config.seed.as_bytes(), config.n);
        let replica_cfg = ReplicaConfig {
            n: config.n,
            f,
            c: config.c,
            committee_seed: config.seed.as_bytes().to_vec(),
            epoch_timeout: config.epoch_timeout(),
            block_timeout: config.block_timeout(),
        };
        let engines: Vec<Engine> = (0..config.n)
            .map(|i| match config.protocol {
                Protocol::Proteus => Engine::Proteus(Box::new(Replica::new(
                    ReplicaId(i),
                    replica_cfg.clone(),
                    auth.clone(),
                ))),
                Protocol::Pbft => {
                    Engine::Pbft(Box::new(PbftReplica::new(ReplicaId(i), config.n, f, auth.clone())))
                }
            })
            .collect();

        let mut h = Sha256::new();
        h.update(b"net");
        h.update(config.seed.as_bytes());
        let key = h.finalize();
        let mut rng_key = [0u8; 32];
        rng_key.copy_from_slice(&key);

        let metrics = RunMetrics::new(
            config.protocol.name(),
            config.n,
            f,
            config.c,
            config.block_size,
            &config.seed,
        );
        let trace = Trace::new(config.emit_trace, config);
        Ok(Simulation {
            f,
            engines,
            strategies,
            queue: EventQueue::new(),
            net_rng: ChaCha20Rng::from_seed(rng_key),
            metrics,
            trace,
            tick: 0,
            timer_generations: BTreeMap::new(),
            registry: BTreeMap::new(),
            commits: BTreeMap::new(),
            proposal_ticks: BTreeMap::new(),
            vote_monitor: BTreeSet::new(),
            done_at: None,
            cfg: config.clone(),
        })
    }

    fn is_correct(&self, replica: u32) -> bool {
        !self.strategies[replica as usize].is_byzantine()
    }

    fn correct_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.cfg.n).filter(|&i| self.is_correct(i))
    }

    fn done(&self) -> bool {
        self.correct_ids()
            .all(|i| self.engines[i as usize].tip_seq() >= self.cfg.epochs)
    }

    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        self.metrics.epochs_target = self.cfg.epochs;
        // Arm the initial epoch timers and kick off the first proposal.
        for i in 0..self.cfg.n {
            if let Engine::Proteus(r) = &self.engines[i as usize] {
                let out = r.startup();
                self.apply_output(i, out, 0)?;
            }
        }
        self.poke_proposers(0)?;

        let budget = self.cfg.budget();
        while let Some(entry) = self.queue.pop() {
            if entry.tick > budget {
                break;
            }
            self.tick = entry.tick.max(self.tick);
            let dest = entry.dest.0;
            match entry.payload {
                Payload::Timer { id, generation } => {
                    // Once every correct replica holds the target chain,
                    // pending timers are noise: suppress them and drain only
                    // in-flight messages.
                    if self.done_at.is_some() {
                        continue;
                    }
                    if self.timer_generations.get(&(dest, id)) != Some(&generation) {
                        continue;
                    }
                    let detail = Trace::describe_timer(&id);
                    let out = self.step_with_strategy(dest, ReplicaEvent::TimerFired(id))?;
                    self.emit_trace(dest, "timer", &detail, &out);
                    self.apply_output(dest, out, 0)?;
                }
                Payload::Message { msg, depth, .. } => {
                    let detail = Trace::describe_delivery(&msg);
                    let event = ReplicaEvent::Deliver((*msg).clone());
                    let out = self.step_with_strategy(dest, event)?;
                    self.emit_trace(dest, "deliver", &detail, &out);
                    self.apply_output(dest, out, depth)?;
                }
            }
            self.poke_proposers(0)?;
            if self.done_at.is_none() && self.done() {
                self.done_at = Some(self.tick);
            }
        }

        self.finalize()
    }

    fn step_with_strategy(&mut self, dest: u32, event: ReplicaEvent) -> Result<StepOutput, SimError> {
        let strategy = self.strategies[dest as usize].clone();
        let honest = self.engines[dest as usize].step(event.clone());
        if !strategy.is_byzantine() {
            return Ok(honest);
        }
        match &self.engines[dest as usize] {
            Engine::Proteus(r) => {
                Ok(apply_strategy(&strategy, r, Some(&event), self.tick, honest)?)
            }
            // The baseline runs failure-free; strategies do not apply.
            Engine::Pbft(_) => Ok(honest),
        }
    }

    fn emit_trace(&mut self, dest: u32, kind: &str, detail: &str, out: &StepOutput) {
        let tick = self.tick;
        self.trace.event(tick, ReplicaId(dest), kind, detail, out);
    }

    /// Drives the current primary to propose whenever it is idle in normal
    /// mode and epochs remain.
    fn poke_proposers(&mut self, depth: u32) -> Result<(), SimError> {
        if self.done_at.is_some() {
            return Ok(());
        }
        loop {
            let mut proposed = false;
            for i in 0..self.cfg.n {
                let next_seq = {
                    let engine = &self.engines[i as usize];
                    match engine {
                        Engine::Proteus(r) => {
                            if r.mode() != Mode::Normal
                                || !r.is_primary()
                                || r.has_inflight()
                                || r.tip_seq() >= self.cfg.epochs
                            {
                                continue;
                            }
                            r.tip_seq() + 1
                        }
                        Engine::Pbft(r) => {
                            if !r.is_primary() || r.has_inflight() || r.tip_seq() >= self.cfg.epochs
                            {
                                continue;
                            }
                            r.tip_seq() + 1
                        }
                    }
                };
                let txs = transactions_for(&self.cfg.seed, next_seq, self.cfg.block_size);
                let honest = match &mut self.engines[i as usize] {
                    Engine::Proteus(r) => match r.make_proposal(txs) {
                        Ok(out) => out,
                        Err(_) => continue,
                    },
                    Engine::Pbft(r) => r.make_proposal(txs),
                };
                let out = match &self.engines[i as usize] {
                    Engine::Proteus(r) => apply_strategy(
                        &self.strategies[i as usize],
                        r,
                        None,
                        self.tick,
                        honest,
                    )?,
                    Engine::Pbft(_) => honest,
                };
                self.proposal_ticks.entry(next_seq).or_insert(self.tick);
                self.emit_trace(i, "propose", &format!("seq {next_seq}"), &out);
                self.apply_output(i, out, depth)?;
                proposed = true;
            }
            if !proposed {
                return Ok(());
            }
        }
    }

    /// Interprets a step output: enqueue sends with latency, stagger, drops
    /// and retransmissions; arm and cancel timers; record commits and run
    /// the safety monitor.
    fn apply_output(&mut self, sender: u32, out: StepOutput, parent_depth: u32) -> Result<(), SimError> {
        let depth = parent_depth + 1;
        for om in &out.messages {
            self.monitor_votes(sender, om)?;
            self.enqueue_message(sender, om, depth);
        }
        for (timer, duration) in &out.timer_sets {
            let gen = self
                .timer_generations
                .entry((sender, *timer))
                .and_modify(|g| *g += 1)
                .or_insert(1);
            let gen = *gen;
            self.queue
                .push_timer(self.tick + duration, ReplicaId(sender), *timer, gen);
        }
        for timer in &out.timer_cancels {
            self.timer_generations
                .entry((sender, *timer))
                .and_modify(|g| *g += 1)
                .or_insert(1);
        }
        for (block, _) in &out.committed {
            self.record_commit(sender, block, parent_depth)?;
        }
        Ok(())
    }

    /// Once-only voting check for correct replicas.
    fn monitor_votes(&mut self, sender: u32, om: &OutboundMessage) -> Result<(), SimError> {
        if !self.is_correct(sender) {
            return Ok(());
        }
        let kind = om.message.kind();
        if !matches!(
            kind,
            MessageKind::Prepare | MessageKind::Commit | MessageKind::Approval
        ) {
            return Ok(());
        }
        if !self
            .vote_monitor
            .insert((sender, kind.tag(), om.message.view, om.message.seq))
        {
            return Err(SimError::DoubleVote {
                replica: sender,
                kind: kind.name(),
                view: om.message.view,
                seq: om.message.seq,
            });
        }
        Ok(())
    }

    fn enqueue_message(&mut self, sender: u32, om: &OutboundMessage, depth: u32) {
        let msg = Arc::new(om.message.clone());
        let txs_carried = match &om.message.body {
            MessageBody::PrePrepare { block } => block.payload.len(),
            MessageBody::BlockProposal { block, .. } => block.payload.len(),
            MessageBody::Confirm {
                block: Some(block), ..
            } => block.payload.len(),
            _ => 0,
        };
        let occupancy = self.cfg.send_cost.per_copy + self.cfg.send_cost.per_tx * txs_carried as f64;
        let mut copy_index = 0u64;
        for &recipient in &om.recipients {
            if recipient.0 == sender {
                self.metrics.self_sends += 1;
                self.queue
                    .push_message(self.tick, recipient, msg.clone(), depth, false);
                continue;
            }
            self.metrics.record_send(om.message.kind());
            let stagger = (copy_index as f64 * occupancy).floor() as u64;
            copy_index += 1;
            let mut delay = self.cfg.latency.draw(&mut self.net_rng) + om.extra_delay + stagger;
            let mut retransmitted = false;
            while self.cfg.drop_rate > 0.0 && self.net_rng.random::<f64>() < self.cfg.drop_rate {
                delay += self.cfg.retransmit_timeout() + self.cfg.latency.draw(&mut self.net_rng);
                self.metrics.retransmissions += 1;
                retransmitted = true;
            }
            self.queue
                .push_message(self.tick + delay, recipient, msg.clone(), depth, retransmitted);
        }
    }

    fn record_commit(&mut self, replica: u32, block: &proteus_core::Block, depth: u32) -> Result<(), SimError> {
        if !self.is_correct(replica) {
            return Ok(());
        }
        match self.registry.get(&block.seq) {
            Some((first, digest)) if *digest != block.digest => {
                return Err(SimError::SafetyViolation {
                    seq: block.seq,
                    a: *first,
                    b: replica,
                });
            }
            None => {
                self.registry.insert(block.seq, (replica, block.digest));
            }
            _ => {}
        }
        self.commits.entry(block.seq).or_default().insert(
            replica,
            CommitInfo {
                tick: self.tick,
                depth,
            },
        );
        Ok(())
    }

    fn finalize(mut self) -> Result<SimOutcome, SimError> {
        let correct: Vec<u32> = self.correct_ids().collect();
        for &i in &correct {
            let engine = &self.engines[i as usize];
            engine
                .chain()
                .validate(self.f)
                .map_err(|e| SimError::BadChain {
                    replica: i,
                    detail: e.to_string(),
                })?;
        }
        self.metrics.per_replica_tips = (0..self.cfg.n)
            .map(|i| self.engines[i as usize].tip_seq())
            .collect();
        self.metrics.committed_epochs = correct
            .iter()
            .map(|&i| self.engines[i as usize].tip_seq())
            .min()
            .unwrap_or(0)
            .min(self.cfg.epochs);
        self.metrics.committed_txs = self.metrics.committed_epochs * self.cfg.block_size as u64;
        self.metrics.total_ticks = self.done_at.unwrap_or(self.tick);
        self.metrics.view_changes = correct
            .iter()
            .map(|&i| self.engines[i as usize].view())
            .max()
            .unwrap_or(0);

        for seq in 1..=self.metrics.committed_epochs {
            let Some(&proposed) = self.proposal_ticks.get(&seq) else {
                continue;
            };
            let Some(infos) = self.commits.get(&seq) else {
                continue;
            };
            let committed = correct
                .iter()
                .filter_map(|i| infos.get(i))
                .map(|c| c.tick)
                .max()
                .unwrap_or(proposed);
            let depth = correct
                .iter()
                .filter_map(|i| infos.get(i))
                .map(|c| c.depth)
                .max()
                .unwrap_or(0);
            self.metrics.per_epoch.push(crate::metrics::EpochRecord {
                seq,
                proposed_tick: proposed,
                committed_tick: committed,
                latency_ticks: committed.saturating_sub(proposed),
                commit_depth: depth,
            });
        }

        Ok(SimOutcome {
            metrics: self.metrics,
            trace: self.trace.into_text(),
        })
    }

    /// Read access for invariant checks in tests.
    pub fn replica(&self, i: u32) -> Option<&Replica> {
        self.engines[i as usize].proteus()
    }
}

/// Runs one configured simulation to completion.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimOutcome, SimError> {
    Simulation::new(config)?.run()
}
