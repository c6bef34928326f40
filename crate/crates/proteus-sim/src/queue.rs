//! Deterministic event queue: entries are processed in (tick, class,
//! insertion order) order, a total order. Message deliveries sort before
//! timer fires at the same tick, so a delivery that should cancel a timer
//! always wins the tie.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use proteus_core::replica::TimerId;
use proteus_core::{ReplicaId, SignedMessage};

#[derive(Clone, Debug)]
pub enum Payload {
    Message {
        msg: Arc<SignedMessage>,
        /// Causal stage depth: one more than the event that produced it.
        depth: u32,
        retransmitted: bool,
    },
    Timer {
        id: TimerId,
        /// Generation at arming time; stale generations are skipped.
        generation: u64,
    },
}

#[derive(Clone, Debug)]
pub struct QueueEntry {
    pub tick: u64,
    class: u8,
    seq: u64,
    pub dest: ReplicaId,
    pub payload: Payload,
}

impl QueueEntry {
    fn key(&self) -> (u64, u8, u64) {
        (self.tick, self.class, self.seq)
    }
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<QueueEntry>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> EventQueue {
        EventQueue::default()
    }

    pub fn push_message(
        &mut self,
        tick: u64,
        dest: ReplicaId,
        msg: Arc<SignedMessage>,
        depth: u32,
        retransmitted: bool,
    ) {
        let entry = QueueEntry {
            tick,
            class: 0,
            seq: self.next_seq,
            dest,
            payload: Payload::Message {
                msg,
                depth,
                retransmitted,
            },
        };
        self.next_seq += 1;
        self.heap.push(Reverse(entry));
    }

    pub fn push_timer(&mut self, tick: u64, dest: ReplicaId, id: TimerId, generation: u64) {
        let entry = QueueEntry {
            tick,
            class: 1,
            seq: self.next_seq,
            dest,
            payload: Payload::Timer { id, generation },
        };
        self.next_seq += 1;
        self.heap.push(Reverse(entry));
    }

    pub fn pop(&mut self) -> Option<QueueEntry> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_sort_before_timers_at_same_tick() {
        let mut q = EventQueue::new();
        q.push_timer(
            5,
            ReplicaId(0),
            TimerId::Epoch { view: 0, seq: 1 },
            0,
        );
        let msg = Arc::new(proteus_core::SignedMessage {
            view: 0,
            seq: 1,
            digest: proteus_core::Digest::ZERO,
            sender: ReplicaId(1),
            body: proteus_core::MessageBody::Prepare,
            signature: proteus_core::Signature([0; 32]),
        });
        q.push_message(5, ReplicaId(0), msg, 1, false);

        let first = q.pop().unwrap();
        assert!(matches!(first.payload, Payload::Message { .. }));
        let second = q.pop().unwrap();
        assert!(matches!(second.payload, Payload::Timer { .. }));
    }

    #[test]
    fn insertion_order_breaks_tick_ties() {
        let mut q = EventQueue::new();
        for i in 0..5u32 {
            q.push_timer(
                3,
                ReplicaId(i),
                TimerId::Epoch { view: 0, seq: 1 },
                0,
            );
        }
        let order: Vec<u32> = std::iter::from_fn(|| q.pop()).map(|e| e.dest.0).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }
}
