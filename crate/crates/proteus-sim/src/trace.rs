//! JSONL execution trace. One header line with the run parameters, then one
//! line per processed event: deliveries, timer fires, outbound message
//! summaries, commits and validation notes. Byte-stable for a given config.

use proteus_core::committee::SELECTION_ALGORITHM;
use proteus_core::replica::{StepOutput, TimerId};
use proteus_core::{ReplicaId, SignedMessage};
use serde::Serialize;

use crate::config::SimulationConfig;

#[derive(Serialize)]
struct MsgOut<'a> {
    kind: &'a str,
    view: u64,
    seq: u64,
    digest: String,
    to: usize,
}

#[derive(Serialize)]
struct Committed {
    seq: u64,
    view: u64,
    digest: String,
}

pub struct Trace {
    enabled: bool,
    lines: Vec<String>,
}

impl Trace {
    pub fn new(enabled: bool, config: &SimulationConfig) -> Trace {
        let mut trace = Trace {
            enabled,
            lines: Vec::new(),
        };
        if enabled {
            let header = serde_json::json!({
                "header": {
                    "config": config,
                    "selection_algorithm": SELECTION_ALGORITHM,
                    "seed": config.seed,
                }
            });
            trace.lines.push(header.to_string());
        }
        trace
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn event(
        &mut self,
        tick: u64,
        replica: ReplicaId,
        event_kind: &str,
        detail: &str,
        out: &StepOutput,
    ) {
        if !self.enabled {
            return;
        }
        let msgs: Vec<MsgOut> = out
            .messages
            .iter()
            .map(|m| MsgOut {
                kind: m.message.kind().name(),
                view: m.message.view,
                seq: m.message.seq,
                digest: m.message.digest.short(),
                to: m.recipients.len(),
            })
            .collect();
        let committed: Vec<Committed> = out
            .committed
            .iter()
            .map(|(b, _)| Committed {
                seq: b.seq,
                view: b.view,
                digest: b.digest.short(),
            })
            .collect();
        let notes: Vec<serde_json::Value> = out
            .notes
            .iter()
            .map(|n| serde_json::json!({"tag": n.tag, "detail": n.detail}))
            .collect();
        let line = serde_json::json!({
            "tick": tick,
            "replica": replica.0,
            "event_kind": event_kind,
            "detail": detail,
            "msgs_out": msgs,
            "committed": committed,
            "notes": notes,
            "vc": {
                "entered": out.entered_view,
                "completed": out.completed_view,
            },
        });
        self.lines.push(line.to_string());
    }

    pub fn describe_delivery(msg: &SignedMessage) -> String {
        format!(
            "{} v{} s{} {} from {}",
            msg.kind().name(),
            msg.view,
            msg.seq,
            msg.digest.short(),
            msg.sender.0
        )
    }

    pub fn describe_timer(id: &TimerId) -> String {
        match id {
            TimerId::Epoch { view, seq } => format!("epoch-timer v{view} s{seq}"),
            TimerId::BlockTimer { view, seq } => format!("block-timer v{view} s{seq}"),
            TimerId::ViewChangeTimer { view } => format!("view-change-timer v{view}"),
        }
    }

    pub fn into_text(self) -> Option<String> {
        if self.enabled {
            Some(self.lines.join("\n") + "\n")
        } else {
            None
        }
    }
}
