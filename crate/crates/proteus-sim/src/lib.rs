//! Deterministic discrete-event simulation of the Proteus protocol and its
//! PBFT baseline: seeded scheduling, configurable latency, drop and
//! retransmission, adversary injection, message accounting and epoch
//! measurements.

pub mod compare;
pub mod config;
pub mod harness;
pub mod metrics;
pub mod queue;
pub mod trace;

pub use compare::{compare_with_pbft, Comparison};
pub use config::{
    AdversaryAssignment, ConfigError, LatencyModel, Protocol, SendCost, SimulationConfig,
    TimeoutMultipliers,
};
pub use harness::{run_simulation, transactions_for, SimError, SimOutcome, Simulation};
pub use metrics::{phase_of, Phase, RunMetrics};
