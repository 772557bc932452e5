//! Deterministic discrete-event simulator.
//!
//! One priority queue of timestamped events drives every replica; ties break
//! on a monotone sequence number assigned at enqueue time, so a run is a
//! pure function of the scenario (seed included). Replicas read the clock
//! only through their own event timestamps; there is no skew.
//!
//! Self-deliveries (a replica's broadcast looping back to itself) are
//! enqueued with zero delay and carry no network cost. Everything else is
//! delayed by the network model and accounted byte-for-byte in its canonical
//! wire encoding.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use kudzu_core::crypto::KeyRegistry;
use kudzu_core::replica::{
    accept_all_payloads, InboundEvent, OutboundAction, Replica, ReplicaConfig, SeededPayloads,
};
use kudzu_core::types::{CertKind, Message, ReplicaId, Slot, Time, Vote};
use kudzu_core::wire::{decode_message, encode_message};

use crate::adversary::{build_adversary, AdvAction, Adversary};
use crate::network::NetworkModel;
use crate::scenario::Scenario;
use crate::trace::{
    LogRecord, MsgKind, ReplicaSnapshot, RunStats, RunTrace, TraceEvent, TreeNodeRecord,
    TIMEOUT_TARGET,
};

#[derive(Clone, Debug, PartialEq, Eq)]
enum SimPayload {
    Deliver {
        from: ReplicaId,
        sent_at: Time,
        bytes: Vec<u8>,
    },
    Wake,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SimEvent {
    at: Time,
    seq: u64,
    target: ReplicaId,
    payload: SimPayload,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

enum Actor {
    Honest(Box<Replica>),
    Corrupt(Box<dyn Adversary>),
}

pub struct Sim {
    scenario: Scenario,
    network: NetworkModel,
    rng: ChaCha20Rng,
    actors: BTreeMap<ReplicaId, Actor>,
    queue: BinaryHeap<Reverse<SimEvent>>,
    seq: u64,
    now: Time,
    events: Vec<TraceEvent>,
    stats: RunStats,
    /// Slots whose leader's proposal dispatch has been traced.
    proposal_traced: std::collections::BTreeSet<Slot>,
}

impl Sim {
    pub fn new(scenario: Scenario) -> Result<Sim> {
        scenario.validate()?;
        let registry = Arc::new(KeyRegistry::from_seed(scenario.seed, scenario.n));
        let mut actors = BTreeMap::new();
        for id in 1..=scenario.n {
            let behavior = scenario
                .adversary
                .iter()
                .find(|a| a.replica == id)
                .map(|a| a.behavior);
            let actor = match behavior {
                None => Actor::Honest(Box::new(Replica::new(
                    ReplicaConfig {
                        id,
                        params: scenario.params(),
                        delta_timeout: scenario.delta_timeout(),
                        rotation: scenario.rotation(),
                    },
                    registry.clone(),
                    Box::new(SeededPayloads {
                        seed: scenario.seed,
                        size: scenario.payload_size,
                    }),
                    accept_all_payloads(),
                ))),
                Some(cfg) => Actor::Corrupt(build_adversary(cfg, id, &scenario, registry.clone())),
            };
            actors.insert(id, actor);
        }
        let network = NetworkModel::new(&scenario.network, scenario.delta);
        let rng = ChaCha20Rng::seed_from_u64(scenario.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Sim {
            network,
            rng,
            actors,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            events: Vec::new(),
            stats: RunStats::default(),
            proposal_traced: std::collections::BTreeSet::new(),
            scenario,
        })
    }

    /// Enqueues arbitrary bytes from a corrupt sender, bypassing its
    /// behavior script. Harness hook for hand-written attack scripts.
    pub fn inject_message(&mut self, from: ReplicaId, to: &[ReplicaId], bytes: Vec<u8>, at: Time) {
        assert!(
            self.scenario.corrupt_set().contains(&from),
            "only corrupt replicas may inject raw bytes"
        );
        for &target in to {
            let seq = self.next_seq();
            self.push(SimEvent {
                at,
                seq,
                target,
                payload: SimPayload::Deliver {
                    from,
                    sent_at: at,
                    bytes: bytes.clone(),
                },
            });
        }
    }

    fn next_seq(&mut self) -> u64 {
        let seq = self.seq;
        self.seq += 1;
        seq
    }

    fn push(&mut self, event: SimEvent) {
        self.queue.push(Reverse(event));
    }

    /// Drives every replica to the horizon and returns the full trace.
    pub fn run(mut self) -> RunTrace {
        // Time zero: all replicas enter slot 1.
        let ids: Vec<ReplicaId> = self.actors.keys().copied().collect();
        for id in &ids {
            let mut actor = self.actors.remove(id).expect("actor exists");
            match &mut actor {
                Actor::Honest(replica) => {
                    let actions = replica.start(0);
                    self.route_actions(*id, 0, actions);
                }
                Actor::Corrupt(adversary) => {
                    let actions = adversary.start(0);
                    self.route_adv_actions(*id, 0, actions);
                }
            }
            self.actors.insert(*id, actor);
        }

        while let Some(Reverse(event)) = self.queue.pop() {
            if event.at > self.scenario.horizon {
                break;
            }
            self.now = event.at;
            self.stats.events_processed += 1;
            let SimEvent {
                at,
                target,
                payload,
                ..
            } = event;
            let mut actor = match self.actors.remove(&target) {
                Some(actor) => actor,
                None => continue,
            };
            match (&mut actor, payload) {
                (Actor::Honest(replica), SimPayload::Deliver {
                    from,
                    sent_at,
                    bytes,
                }) => {
                    if from != target {
                        self.events.push(TraceEvent::Deliver {
                            at,
                            sent_at,
                            from,
                            to: target,
                        });
                        *self.stats.bytes_received.entry(target).or_default() +=
                            bytes.len() as u64;
                    }
                    let actions = replica.handle_event(at, InboundEvent::Message { from, bytes });
                    self.route_actions(target, at, actions);
                }
                (Actor::Honest(replica), SimPayload::Wake) => {
                    let actions = replica.handle_event(at, InboundEvent::Timer);
                    self.route_actions(target, at, actions);
                }
                (Actor::Corrupt(adversary), SimPayload::Deliver {
                    from,
                    sent_at,
                    bytes,
                }) => {
                    if from != target {
                        self.events.push(TraceEvent::Deliver {
                            at,
                            sent_at,
                            from,
                            to: target,
                        });
                        *self.stats.bytes_received.entry(target).or_default() +=
                            bytes.len() as u64;
                    }
                    let actions = adversary.on_deliver(at, from, &bytes);
                    self.route_adv_actions(target, at, actions);
                }
                (Actor::Corrupt(adversary), SimPayload::Wake) => {
                    let actions = adversary.on_wake(at);
                    self.route_adv_actions(target, at, actions);
                }
            }
            self.actors.insert(target, actor);
        }

        self.finish()
    }

    /// Sends raw bytes from `from` to `to`, tracing and accounting when it
    /// crosses the network.
    fn send_bytes(&mut self, from: ReplicaId, to: ReplicaId, at: Time, bytes: Vec<u8>) {
        if from == to {
            // Zero-delay loopback, no network cost.
            let seq = self.next_seq();
            self.push(SimEvent {
                at,
                seq,
                target: to,
                payload: SimPayload::Deliver {
                    from,
                    sent_at: at,
                    bytes,
                },
            });
            return;
        }
        let (kind, slot) = classify(&bytes);
        self.events.push(TraceEvent::Send {
            at,
            from,
            to,
            kind,
            slot,
            bytes: bytes.len() as u64,
        });
        *self.stats.bytes_sent.entry(from).or_default() += bytes.len() as u64;
        *self.stats.messages_sent.entry(from).or_default() += 1;
        if let Some(slot) = slot {
            *self.stats.messages_by_slot.entry(slot).or_default() += 1;
        }
        let delay = self.network.delivery_delay(&mut self.rng, at).max(1);
        let seq = self.next_seq();
        self.push(SimEvent {
            at: at + delay,
            seq,
            target: to,
            payload: SimPayload::Deliver {
                from,
                sent_at: at,
                bytes,
            },
        });
    }

    fn route_actions(&mut self, id: ReplicaId, at: Time, actions: Vec<OutboundAction>) {
        for action in actions {
            match action {
                OutboundAction::SendTo(to, message) => {
                    if let Message::Proposal(bp) = &message {
                        if self.proposal_traced.insert(bp.block.slot) {
                            self.events.push(TraceEvent::ProposalSent {
                                at,
                                leader: id,
                                slot: bp.block.slot,
                                block: bp.block.hash().to_hex(),
                            });
                        }
                    }
                    self.send_bytes(id, to, at, encode_message(&message));
                }
                OutboundAction::Broadcast(message) => {
                    self.trace_broadcast(id, at, &message);
                    let bytes = encode_message(&message);
                    for to in 1..=self.scenario.n {
                        self.send_bytes(id, to, at, bytes.clone());
                    }
                }
                OutboundAction::Finalized(entries) => {
                    for entry in entries {
                        self.events.push(TraceEvent::Finalized {
                            at,
                            replica: id,
                            slot: entry.slot,
                            block: entry.block.to_hex(),
                            kind: format!("{:?}", entry.kind).to_lowercase(),
                        });
                    }
                }
                OutboundAction::Flag(suspect) => {
                    self.events.push(TraceEvent::Flagged {
                        at,
                        replica: id,
                        suspect,
                    });
                }
                OutboundAction::ScheduleWake(wake_at) => {
                    let seq = self.next_seq();
                    self.push(SimEvent {
                        at: wake_at.max(at),
                        seq,
                        target: id,
                        payload: SimPayload::Wake,
                    });
                }
            }
        }
    }

    fn route_adv_actions(&mut self, id: ReplicaId, at: Time, actions: Vec<AdvAction>) {
        for action in actions {
            match action {
                AdvAction::Send { to, bytes } => self.send_bytes(id, to, at, bytes),
                AdvAction::Wake(wake_at) => {
                    let seq = self.next_seq();
                    self.push(SimEvent {
                        at: wake_at.max(at),
                        seq,
                        target: id,
                        payload: SimPayload::Wake,
                    });
                }
            }
        }
    }

    /// Honest vote emissions and fresh certificate acceptances, for the
    /// quorum and boundedness auditors.
    fn trace_broadcast(&mut self, id: ReplicaId, at: Time, message: &Message) {
        match message {
            Message::Vote(vote) => {
                let (kind, slot, target) = match vote {
                    Vote::First(fv) => (
                        MsgKind::FirstVote,
                        fv.block().slot,
                        target_hex(fv.block()),
                    ),
                    Vote::Notar(nv) => (MsgKind::NotarVote, nv.block.slot, target_hex(&nv.block)),
                    Vote::Final(fv) => (MsgKind::FinalVote, fv.block.slot, target_hex(&fv.block)),
                };
                self.events.push(TraceEvent::VoteEmitted {
                    at,
                    signer: id,
                    slot,
                    kind,
                    target,
                });
            }
            Message::Certificate(co) => {
                self.events.push(TraceEvent::CertAccepted {
                    at,
                    replica: id,
                    slot: co.slot(),
                    kind: cert_msg_kind(co.kind),
                    target: target_hex(&co.block),
                    signers: co.cert.signers.clone(),
                });
            }
            Message::Proposal(_) => {}
        }
    }

    fn finish(mut self) -> RunTrace {
        let mut replicas = BTreeMap::new();
        for (id, actor) in &self.actors {
            let Actor::Honest(replica) = actor else {
                continue;
            };
            let tree_adds: BTreeMap<String, Time> = replica
                .tree_add_log()
                .iter()
                .map(|(at, block)| (block.hash().to_hex(), *at))
                .collect();
            let snapshot = ReplicaSnapshot {
                finalized: replica
                    .finalized_log()
                    .iter()
                    .map(|entry| LogRecord {
                        slot: entry.slot,
                        block: entry.block.to_hex(),
                        payload_len: entry.payload_len,
                        kind: format!("{:?}", entry.kind).to_lowercase(),
                        at: entry.at,
                    })
                    .collect(),
                tree: replica
                    .tree()
                    .export()
                    .iter()
                    .map(|(hash, block)| TreeNodeRecord {
                        slot: block.slot,
                        hash: hash.to_hex(),
                        parent: block.parent.map(|p| p.to_hex()),
                        added_at: tree_adds.get(&hash.to_hex()).copied().unwrap_or(0),
                    })
                    .collect(),
                flagged: replica.flagged().into_iter().collect(),
                slot_entries: replica.slot_entry_log().to_vec(),
            };
            replicas.insert(*id, snapshot);
        }
        RunTrace {
            scenario: self.scenario,
            events: std::mem::take(&mut self.events),
            replicas,
            stats: self.stats,
        }
    }
}

fn target_hex(block: &kudzu_core::types::Block) -> String {
    if block.is_timeout() {
        TIMEOUT_TARGET.to_string()
    } else {
        block.hash().to_hex()
    }
}

fn cert_msg_kind(kind: CertKind) -> MsgKind {
    match kind {
        CertKind::Notar => MsgKind::NotarCert,
        CertKind::Timeout => MsgKind::TimeoutCert,
        CertKind::FastFinal => MsgKind::FastFinalCert,
        CertKind::Final => MsgKind::FinalCert,
    }
}

/// Classifies raw bytes for accounting; garbage stays garbage.
fn classify(bytes: &[u8]) -> (MsgKind, Option<Slot>) {
    match decode_message(bytes) {
        Ok(Message::Proposal(bp)) => (MsgKind::Proposal, Some(bp.block.slot)),
        Ok(Message::Vote(Vote::First(fv))) => (MsgKind::FirstVote, Some(fv.block().slot)),
        Ok(Message::Vote(Vote::Notar(nv))) => (MsgKind::NotarVote, Some(nv.block.slot)),
        Ok(Message::Vote(Vote::Final(fv))) => (MsgKind::FinalVote, Some(fv.block.slot)),
        Ok(Message::Certificate(co)) => (cert_msg_kind(co.kind), Some(co.slot())),
        Err(_) => (MsgKind::Garbage, None),
    }
}

/// Builds and runs a scenario in one call.
pub fn run_scenario(scenario: Scenario) -> Result<RunTrace> {
    Ok(Sim::new(scenario)?.run())
}


