//! Run traces: every observable event of a simulation, plus end-of-run
//! replica snapshots, in a serializable form.
//!
//! The trace embeds the scenario that produced it, so a saved trace is
//! replayable: re-running the embedded scenario must reproduce the trace
//! byte for byte. Digests appear as lowercase hex so lexicographic order
//! matches byte order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::scenario::Scenario;
use kudzu_core::types::{ReplicaId, Slot, Time};

/// Message payload classification for accounting.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    Proposal,
    FirstVote,
    NotarVote,
    FinalVote,
    NotarCert,
    TimeoutCert,
    FastFinalCert,
    FinalCert,
    /// Undecodable bytes (adversarial).
    Garbage,
}

/// A vote's target: a concrete block or the slot's timeout block.
pub type TargetHex = String;

pub const TIMEOUT_TARGET: &str = "timeout";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "ev")]
pub enum TraceEvent {
    /// Network send (self-deliveries are not traced).
    Send {
        at: Time,
        from: ReplicaId,
        to: ReplicaId,
        kind: MsgKind,
        /// Protocol slot the message belongs to, when decodable.
        slot: Option<Slot>,
        bytes: u64,
    },
    /// Network delivery, paired with its send time for synchrony auditing.
    Deliver {
        at: Time,
        sent_at: Time,
        from: ReplicaId,
        to: ReplicaId,
    },
    /// An honest replica emitted a vote (broadcast).
    VoteEmitted {
        at: Time,
        signer: ReplicaId,
        slot: Slot,
        kind: MsgKind,
        target: TargetHex,
    },
    /// A certificate entered an honest replica's pool for the first time
    /// (assembled locally or received fresh); exactly the certificates the
    /// replica echoes.
    CertAccepted {
        at: Time,
        replica: ReplicaId,
        slot: Slot,
        kind: MsgKind,
        target: TargetHex,
        signers: Vec<ReplicaId>,
    },
    /// An honest leader dispatched its proposal for a slot (first fragment
    /// send). The latency measurement anchor.
    ProposalSent {
        at: Time,
        leader: ReplicaId,
        slot: Slot,
        block: TargetHex,
    },
    /// An honest replica appended newly finalized entries to its log.
    Finalized {
        at: Time,
        replica: ReplicaId,
        slot: Slot,
        block: TargetHex,
        kind: String,
    },
    /// An honest replica flagged a peer as misbehaving.
    Flagged {
        at: Time,
        replica: ReplicaId,
        suspect: ReplicaId,
    },
}

impl TraceEvent {
    pub fn at(&self) -> Time {
        match self {
            TraceEvent::Send { at, .. }
            | TraceEvent::Deliver { at, .. }
            | TraceEvent::VoteEmitted { at, .. }
            | TraceEvent::CertAccepted { at, .. }
            | TraceEvent::ProposalSent { at, .. }
            | TraceEvent::Finalized { at, .. }
            | TraceEvent::Flagged { at, .. } => *at,
        }
    }
}

/// A tree node as exported at the end of a run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TreeNodeRecord {
    pub slot: Slot,
    pub hash: TargetHex,
    pub parent: Option<TargetHex>,
    /// When the block entered this replica's tree.
    pub added_at: Time,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub slot: Slot,
    pub block: TargetHex,
    pub payload_len: u64,
    pub kind: String,
    pub at: Time,
}

/// Per-replica end-of-run state (honest replicas only).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct ReplicaSnapshot {
    pub finalized: Vec<LogRecord>,
    pub tree: Vec<TreeNodeRecord>,
    pub flagged: Vec<ReplicaId>,
    /// `(slot, entry_time)` pairs, ascending.
    pub slot_entries: Vec<(Slot, Time)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct RunStats {
    pub bytes_sent: BTreeMap<ReplicaId, u64>,
    pub bytes_received: BTreeMap<ReplicaId, u64>,
    pub messages_sent: BTreeMap<ReplicaId, u64>,
    /// Network messages attributed to the protocol slot they carry.
    pub messages_by_slot: BTreeMap<Slot, u64>,
    pub events_processed: u64,
}

/// Complete, replayable record of one simulation run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunTrace {
    pub scenario: Scenario,
    pub events: Vec<TraceEvent>,
    pub replicas: BTreeMap<ReplicaId, ReplicaSnapshot>,
    pub stats: RunStats,
}

impl RunTrace {
    /// Canonical byte form used for determinism comparisons.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> anyhow::Result<RunTrace> {
        Ok(serde_json::from_str(text)?)
    }

    /// Line-delimited trace file: the scenario header, one line per event,
    /// one line per replica snapshot, then the stats. Replayable and easy
    /// to grep or stream offline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |value: serde_json::Value| {
            out.push_str(&value.to_string());
            out.push('\n');
        };
        push(serde_json::json!({ "scenario": self.scenario }));
        for event in &self.events {
            push(serde_json::json!({ "event": event }));
        }
        for (id, snapshot) in &self.replicas {
            push(serde_json::json!({ "replica": id, "snapshot": snapshot }));
        }
        push(serde_json::json!({ "stats": self.stats }));
        out
    }

    pub fn from_jsonl(text: &str) -> anyhow::Result<RunTrace> {
        let mut scenario = None;
        let mut events = Vec::new();
        let mut replicas = BTreeMap::new();
        let mut stats = None;
        for (number, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| anyhow::anyhow!("trace line {}: {e}", number + 1))?;
            if let Some(s) = value.get("scenario") {
                scenario = Some(serde_json::from_value(s.clone())?);
            } else if let Some(e) = value.get("event") {
                events.push(serde_json::from_value(e.clone())?);
            } else if let Some(snapshot) = value.get("snapshot") {
                let id: ReplicaId = serde_json::from_value(
                    value
                        .get("replica")
                        .ok_or_else(|| anyhow::anyhow!("snapshot line without replica id"))?
                        .clone(),
                )?;
                replicas.insert(id, serde_json::from_value(snapshot.clone())?);
            } else if let Some(s) = value.get("stats") {
                stats = Some(serde_json::from_value(s.clone())?);
            } else {
                anyhow::bail!("trace line {}: unknown record", number + 1);
            }
        }
        Ok(RunTrace {
            scenario: scenario.ok_or_else(|| anyhow::anyhow!("trace missing scenario header"))?,
            events,
            replicas,
            stats: stats.ok_or_else(|| anyhow::anyhow!("trace missing stats record"))?,
        })
    }
}
