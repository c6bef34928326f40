//! Paired baseline comparison: the same configuration and seed run under
//! both protocols, reported side by side.

use serde::Serialize;

use crate::config::{Protocol, SimulationConfig};
use crate::harness::{run_simulation, SimError};
use crate::metrics::RunMetrics;

#[derive(Serialize)]
pub struct Comparison {
    pub proteus: RunMetrics,
    pub pbft: RunMetrics,
    /// Per-epoch normal-mode message ratio proteus/pbft.
    pub message_ratio: f64,
    pub proteus_median_latency: u64,
    pub pbft_median_latency: u64,
}

pub fn compare_with_pbft(config: &SimulationConfig) -> Result<Comparison, SimError> {
    let mut proteus_cfg = config.clone();
    proteus_cfg.protocol = Protocol::Proteus;
    let mut pbft_cfg = config.clone();
    pbft_cfg.protocol = Protocol::Pbft;

    let proteus = run_simulation(&proteus_cfg)?.metrics;
    let pbft = run_simulation(&pbft_cfg)?.metrics;
    let message_ratio = if pbft.messages_per_epoch() > 0.0 {
        proteus.messages_per_epoch() / pbft.messages_per_epoch()
    } else {
        f64::INFINITY
    };
    Ok(Comparison {
        proteus_median_latency: proteus.median_epoch_latency(),
        pbft_median_latency: pbft.median_epoch_latency(),
        message_ratio,
        proteus,
        pbft,
    })
}
