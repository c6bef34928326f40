//! Run configuration: sizes, seeds, latency model, adversary assignments and
//! timeout multipliers. Everything a run needs is in here, so identical
//! configs yield identical runs.

use proteus_core::adversary::AdversaryStrategy;
use proteus_core::default_f;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LatencyModel {
    /// Uniform integer ticks in [lo, hi].
    Uniform { lo: u64, hi: u64 },
    /// Round(exp(N(mu, sigma))), clamped to at least one tick.
    Lognormal { mu: f64, sigma: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Uniform { lo: 1, hi: 10 }
    }
}

impl LatencyModel {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> u64 {
        match self {
            LatencyModel::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            LatencyModel::Lognormal { mu, sigma } => {
                // Box-Muller from two uniform draws keeps the dependency
                // surface small and the stream deterministic.
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (mu + sigma * z).exp().round().max(1.0) as u64
            }
        }
    }

    /// Upper-quantile one-way latency used to derive timeouts.
    pub fn p99(&self) -> u64 {
        match self {
            LatencyModel::Uniform { hi, .. } => *hi,
            LatencyModel::Lognormal { mu, sigma } => {
                (mu + 2.326 * sigma).exp().ceil().max(1.0) as u64
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            LatencyModel::Uniform { lo, hi } => {
                if *lo == 0 || hi < lo {
                    return Err(ConfigError::Invalid(format!(
                        "uniform latency needs 1 <= lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            LatencyModel::Lognormal { sigma, .. } => {
                if *sigma < 0.0 {
                    return Err(ConfigError::Invalid("lognormal sigma must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Strategy assignment for one replica, in the external JSON shape
/// {"replica": 0, "strategy": "equivocating-primary", "params": {...}}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversaryAssignment {
    pub replica: u32,
    pub strategy: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

impl AdversaryAssignment {
    pub fn to_strategy(&self) -> Result<AdversaryStrategy, ConfigError> {
        let p = &self.params;
        let strategy = match self.strategy.as_str() {
            "honest" => AdversaryStrategy::Honest,
            "crash" => AdversaryStrategy::Crash {
                after_tick: p.get("after_tick").and_then(|v| v.as_u64()).unwrap_or(0),
            },
            "silent-primary" => AdversaryStrategy::SilentPrimary,
            "equivocating-primary" => AdversaryStrategy::EquivocatingPrimary,
            "withhold-votes" => AdversaryStrategy::WithholdVotes,
            "conflicting-history" => AdversaryStrategy::ConflictingHistory,
            "delay-all" => AdversaryStrategy::DelayAll {
                ticks: p.get("ticks").and_then(|v| v.as_u64()).unwrap_or(10),
            },
            other => {
                return Err(ConfigError::Invalid(format!("unknown strategy '{other}'")))
            }
        };
        Ok(strategy)
    }
}

/// Timeout durations as multiples of the latency model's p99.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TimeoutMultipliers {
    pub epoch: u64,
    pub block: u64,
}

impl Default for TimeoutMultipliers {
    fn default() -> Self {
        TimeoutMultipliers { epoch: 4, block: 2 }
    }
}

/// Per-copy sender occupancy: broadcasts are iterated unicasts, so the k-th
/// copy departs floor(k * (per_copy + per_tx * txs)) ticks after the first.
/// This is what makes message volume show up in latency trends.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SendCost {
    pub per_copy: f64,
    pub per_tx: f64,
}

impl Default for SendCost {
    fn default() -> Self {
        SendCost {
            per_copy: 0.25,
            per_tx: 0.0002,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Proteus,
    Pbft,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Proteus
    }
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Proteus => "proteus",
            Protocol::Pbft => "pbft",
        }
    }
}

fn default_block_size() -> u32 {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: u32,
    /// Byzantine bound; defaults to floor((n-1)/3).
    #[serde(default)]
    pub f: Option<u32>,
    pub c: u32,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    pub epochs: u64,
    pub seed: String,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub adversaries: Vec<AdversaryAssignment>,
    #[serde(default)]
    pub timeouts: TimeoutMultipliers,
    #[serde(default)]
    pub send_cost: SendCost,
    #[serde(default)]
    pub protocol: Protocol,
    /// Hard tick budget; defaults scale with epochs and the epoch timeout.
    #[serde(default)]
    pub max_ticks: Option<u64>,
    /// Emit the JSONL trace (memory-heavy on big runs).
    #[serde(default)]
    pub emit_trace: bool,
}

impl SimulationConfig {
    pub fn resolved_f(&self) -> u32 {
        self.f.unwrap_or_else(|| default_f(self.n))
    }

    /// Sender occupancy per broadcast copy when a block rides along.
    fn occupancy(&self) -> f64 {
        self.send_cost.per_copy + self.send_cost.per_tx * self.block_size as f64
    }

    /// Worst-case extra delay a full broadcast adds through send staggering.
    fn broadcast_slack(&self) -> u64 {
        (self.n as f64 * self.occupancy()).ceil() as u64
    }

    /// Ticks a regular replica waits for a proposal before complaining. The
    /// p99 multiple covers the message stages; the additions cover the
    /// cross-replica skew of the timer start (one delivery) and the sender
    /// staggering accumulated along the pipeline.
    pub fn epoch_timeout(&self) -> u64 {
        self.timeouts.epoch * self.latency.p99() + self.latency.p99() + 4 * self.broadcast_slack()
    }

    pub fn block_timeout(&self) -> u64 {
        self.timeouts.block * self.latency.p99()
            + (2.0 * self.c as f64 * self.occupancy()).ceil() as u64
    }

    /// Link-layer retransmission delay for dropped copies.
    pub fn retransmit_timeout(&self) -> u64 {
        2 * self.latency.p99()
    }

    pub fn budget(&self) -> u64 {
        self.max_ticks
            .unwrap_or(2_000 + self.epochs * self.epoch_timeout() * 30)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Invalid("n must be positive".into()));
        }
        if self.c == 0 || self.c > self.n {
            return Err(ConfigError::Invalid(format!(
                "need 1 <= c <= n, got n={} c={}",
                self.n, self.c
            )));
        }
        let f = self.resolved_f();
        if f >= self.n {
            return Err(ConfigError::Invalid(format!("need f < n, got f={f}")));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(ConfigError::Invalid(format!(
                "drop_rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be positive".into()));
        }
        self.latency.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        let mut byzantine = 0u32;
        for a in &self.adversaries {
            if a.replica >= self.n {
                return Err(ConfigError::Invalid(format!(
                    "adversary assignment names replica {} out of range",
                    a.replica
                )));
            }
            if !seen.insert(a.replica) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate adversary assignment for replica {}",
                    a.replica
                )));
            }
            if a.to_strategy()?.is_byzantine() {
                byzantine += 1;
            }
        }
        if byzantine > f {
            return Err(ConfigError::Invalid(format!(
                "{byzantine} Byzantine replicas exceed the bound f={f}"
            )));
        }
        Ok(())
    }

    /// Per-replica strategies, honest by default.
    pub fn strategies(&self) -> Result<Vec<AdversaryStrategy>, ConfigError> {
        let mut out = vec![AdversaryStrategy::Honest; self.n as usize];
        for a in &self.adversaries {
            out[a.replica as usize] = a.to_strategy()?;
        }
        Ok(out)
    }
}
