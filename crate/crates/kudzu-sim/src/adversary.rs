//! Adversary-controlled replicas.
//!
//! The corrupt set is fixed at time zero (static corruption). Each corrupt
//! replica runs a scripted behavior; the actively Byzantine ones wrap a real
//! replica state machine and distort its outputs by equivocating proposals,
//! splitting first votes across recipient sets, replaying, duplicating, or
//! garbling messages, always signing with their own keys only. Honest
//! replicas must survive all of it by validate-and-drop.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use kudzu_core::codec;
use kudzu_core::crypto::KeyRegistry;
use kudzu_core::replica::{
    accept_all_payloads, InboundEvent, OutboundAction, PayloadSource, Replica, ReplicaConfig,
    SeededPayloads,
};
use kudzu_core::types::{
    make_first_vote, Block, BlockProposal, Message, ReplicaId, Slot, Time, Vote,
};
use kudzu_core::wire::encode_message;

use crate::scenario::{BehaviorCfg, Scenario};

/// What a corrupt replica asks the network to do. Raw bytes: the adversary
/// may put anything on the wire.
#[derive(Debug)]
pub enum AdvAction {
    Send { to: ReplicaId, bytes: Vec<u8> },
    Wake(Time),
}

pub trait Adversary: Send {
    fn start(&mut self, now: Time) -> Vec<AdvAction>;
    fn on_deliver(&mut self, now: Time, from: ReplicaId, bytes: &[u8]) -> Vec<AdvAction>;
    fn on_wake(&mut self, now: Time) -> Vec<AdvAction>;
}

pub fn build_adversary(
    behavior: BehaviorCfg,
    id: ReplicaId,
    scenario: &Scenario,
    registry: Arc<KeyRegistry>,
) -> Box<dyn Adversary> {
    match behavior {
        BehaviorCfg::Silent => Box::new(Silent),
        BehaviorCfg::Crash { at } => Box::new(Crash {
            at,
            shell: HonestShell::new(id, scenario, registry),
        }),
        BehaviorCfg::EquivocateLeader => Box::new(EquivocateLeader {
            split: SplitCrafter::new(id, scenario, registry.clone()),
            shell: HonestShell::new(id, scenario, registry),
        }),
        BehaviorCfg::VoteSplit => Box::new(VoteSplit {
            split: SplitCrafter::new(id, scenario, registry.clone()),
            shell: HonestShell::new(id, scenario, registry),
        }),
        BehaviorCfg::ByzantineRandom => Box::new(ByzantineRandom {
            rng: ChaCha20Rng::seed_from_u64(scenario.seed ^ (0xBAD0 + id as u64)),
            seen: Vec::new(),
            split: SplitCrafter::new(id, scenario, registry.clone()),
            shell: HonestShell::new(id, scenario, registry),
        }),
    }
}

/// Runs the real replica logic for a corrupt identity, handling its
/// self-deliveries internally so behaviors only see externally visible
/// actions.
struct HonestShell {
    replica: Replica,
    id: ReplicaId,
    n: u16,
}

impl HonestShell {
    fn new(id: ReplicaId, scenario: &Scenario, registry: Arc<KeyRegistry>) -> HonestShell {
        let replica = Replica::new(
            ReplicaConfig {
                id,
                params: scenario.params(),
                delta_timeout: scenario.delta_timeout(),
                rotation: scenario.rotation(),
            },
            registry,
            Box::new(SeededPayloads {
                seed: scenario.seed,
                size: scenario.payload_size,
            }),
            accept_all_payloads(),
        );
        HonestShell {
            replica,
            id,
            n: scenario.n,
        }
    }

    fn start(&mut self, now: Time) -> Vec<OutboundAction> {
        let actions = self.replica.start(now);
        self.absorb_self(now, actions)
    }

    fn deliver(&mut self, now: Time, from: ReplicaId, bytes: Vec<u8>) -> Vec<OutboundAction> {
        let actions = self
            .replica
            .handle_event(now, InboundEvent::Message { from, bytes });
        self.absorb_self(now, actions)
    }

    fn wake(&mut self, now: Time) -> Vec<OutboundAction> {
        let actions = self.replica.handle_event(now, InboundEvent::Timer);
        self.absorb_self(now, actions)
    }

    /// Applies the zero-delay self-delivery of broadcasts and self-sends,
    /// returning every action with external visibility.
    fn absorb_self(&mut self, now: Time, actions: Vec<OutboundAction>) -> Vec<OutboundAction> {
        let mut out = Vec::new();
        let mut queue = actions;
        while !queue.is_empty() {
            let mut nested = Vec::new();
            for action in &queue {
                let own_copy = match action {
                    OutboundAction::Broadcast(msg) => Some(msg.clone()),
                    OutboundAction::SendTo(to, msg) if *to == self.id => Some(msg.clone()),
                    _ => None,
                };
                if let Some(msg) = own_copy {
                    let bytes = encode_message(&msg);
                    nested.extend(self.replica.handle_event(
                        now,
                        InboundEvent::Message {
                            from: self.id,
                            bytes,
                        },
                    ));
                }
            }
            out.extend(queue);
            queue = nested;
        }
        out
    }

    /// Honest translation: broadcast fan-out to every other replica.
    fn fan_out(&self, actions: &[OutboundAction]) -> Vec<AdvAction> {
        let mut out = Vec::new();
        for action in actions {
            match action {
                OutboundAction::SendTo(to, msg) if *to != self.id => out.push(AdvAction::Send {
                    to: *to,
                    bytes: encode_message(msg),
                }),
                OutboundAction::Broadcast(msg) => {
                    let bytes = encode_message(msg);
                    for to in 1..=self.n {
                        if to != self.id {
                            out.push(AdvAction::Send {
                                to,
                                bytes: bytes.clone(),
                            });
                        }
                    }
                }
                OutboundAction::ScheduleWake(at) => out.push(AdvAction::Wake(*at)),
                _ => {}
            }
        }
        out
    }
}

struct Silent;

impl Adversary for Silent {
    fn start(&mut self, _now: Time) -> Vec<AdvAction> {
        vec![]
    }
    fn on_deliver(&mut self, _now: Time, _from: ReplicaId, _bytes: &[u8]) -> Vec<AdvAction> {
        vec![]
    }
    fn on_wake(&mut self, _now: Time) -> Vec<AdvAction> {
        vec![]
    }
}

struct Crash {
    at: Time,
    shell: HonestShell,
}

impl Adversary for Crash {
    fn start(&mut self, now: Time) -> Vec<AdvAction> {
        if now >= self.at {
            return vec![];
        }
        let actions = self.shell.start(now);
        self.shell.fan_out(&actions)
    }

    fn on_deliver(&mut self, now: Time, from: ReplicaId, bytes: &[u8]) -> Vec<AdvAction> {
        if now >= self.at {
            return vec![];
        }
        let actions = self.shell.deliver(now, from, bytes.to_vec());
        self.shell.fan_out(&actions)
    }

    fn on_wake(&mut self, now: Time) -> Vec<AdvAction> {
        if now >= self.at {
            return vec![];
        }
        let actions = self.shell.wake(now);
        self.shell.fan_out(&actions)
    }
}

/// Builds the conflicting block and votes that equivocating behaviors send
/// to the second half of the recipient set.
struct SplitCrafter {
    id: ReplicaId,
    registry: Arc<KeyRegistry>,
    params: kudzu_core::types::ProtocolParams,
    alt_payloads: SeededPayloads,
    /// Alternative proposal material per slot, built on first use.
    alt: Option<(Slot, Block, Vec<codec::CertifiedFragment>)>,
}

impl SplitCrafter {
    fn new(id: ReplicaId, scenario: &Scenario, registry: Arc<KeyRegistry>) -> SplitCrafter {
        SplitCrafter {
            id,
            registry,
            params: scenario.params(),
            alt_payloads: SeededPayloads {
                // Different stream from honest payloads, same size.
                seed: scenario.seed ^ 0x6b75_647a,
                size: scenario.payload_size,
            },
            alt: None,
        }
    }

    fn alt_for(&mut self, slot: Slot, parent: Option<kudzu_core::Digest>) -> (Block, Vec<codec::CertifiedFragment>) {
        if let Some((cached_slot, block, frags)) = &self.alt {
            if *cached_slot == slot {
                return (*block, frags.clone());
            }
        }
        let payload = self.alt_payloads.payload(slot);
        let (tag, frags) =
            codec::encode(self.params.codec_params(), &payload).expect("valid params");
        let block = Block::new(slot, tag, parent);
        self.alt = Some((slot, block, frags.clone()));
        (block, frags)
    }

    fn alt_first_vote(&mut self, slot: Slot, parent: Option<kudzu_core::Digest>) -> Message {
        let (block, frags) = self.alt_for(slot, parent);
        let key = self.registry.secret_key(self.id);
        let vote = make_first_vote(
            &key,
            &self.params,
            self.id,
            block,
            Some(frags[(self.id - 1) as usize].clone()),
        );
        Message::Vote(Vote::First(vote))
    }

    /// Recipient split: the lower half of ids sees the original message,
    /// the upper half the conflicting one.
    fn lower_half(&self, to: ReplicaId, n: u16) -> bool {
        to <= n / 2
    }
}

struct EquivocateLeader {
    split: SplitCrafter,
    shell: HonestShell,
}

impl EquivocateLeader {
    fn transform(&mut self, actions: Vec<OutboundAction>) -> Vec<AdvAction> {
        let n = self.shell.n;
        let id = self.shell.id;
        let mut out = Vec::new();
        for action in actions {
            match action {
                // Proposal fan-out: upper half receives the conflicting
                // block, fragment still addressed per recipient.
                OutboundAction::SendTo(to, Message::Proposal(bp)) if to != id => {
                    let msg = if self.split.lower_half(to, n) {
                        Message::Proposal(bp)
                    } else {
                        let (alt_block, alt_frags) =
                            self.split.alt_for(bp.block.slot, bp.block.parent);
                        Message::Proposal(BlockProposal {
                            block: alt_block,
                            fragment: alt_frags[(to - 1) as usize].clone(),
                        })
                    };
                    out.push(AdvAction::Send {
                        to,
                        bytes: encode_message(&msg),
                    });
                }
                OutboundAction::SendTo(to, msg) if to != id => out.push(AdvAction::Send {
                    to,
                    bytes: encode_message(&msg),
                }),
                // First votes follow the same split.
                OutboundAction::Broadcast(Message::Vote(Vote::First(fv)))
                    if !fv.block().is_timeout() =>
                {
                    let slot = fv.block().slot;
                    let parent = fv.block().parent;
                    let original = encode_message(&Message::Vote(Vote::First(fv)));
                    for to in 1..=n {
                        if to == id {
                            continue;
                        }
                        let bytes = if self.split.lower_half(to, n) {
                            original.clone()
                        } else {
                            encode_message(&self.split.alt_first_vote(slot, parent))
                        };
                        out.push(AdvAction::Send { to, bytes });
                    }
                }
                OutboundAction::Broadcast(msg) => {
                    let bytes = encode_message(&msg);
                    for to in 1..=n {
                        if to != id {
                            out.push(AdvAction::Send {
                                to,
                                bytes: bytes.clone(),
                            });
                        }
                    }
                }
                OutboundAction::ScheduleWake(at) => out.push(AdvAction::Wake(at)),
                _ => {}
            }
        }
        out
    }
}

impl Adversary for EquivocateLeader {
    fn start(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.start(now);
        self.transform(actions)
    }
    fn on_deliver(&mut self, now: Time, from: ReplicaId, bytes: &[u8]) -> Vec<AdvAction> {
        let actions = self.shell.deliver(now, from, bytes.to_vec());
        self.transform(actions)
    }
    fn on_wake(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.wake(now);
        self.transform(actions)
    }
}

struct VoteSplit {
    split: SplitCrafter,
    shell: HonestShell,
}

impl VoteSplit {
    fn transform(&mut self, actions: Vec<OutboundAction>) -> Vec<AdvAction> {
        let n = self.shell.n;
        let id = self.shell.id;
        let mut out = Vec::new();
        for action in actions {
            match action {
                OutboundAction::Broadcast(Message::Vote(Vote::First(fv)))
                    if !fv.block().is_timeout() =>
                {
                    let slot = fv.block().slot;
                    let parent = fv.block().parent;
                    let original = encode_message(&Message::Vote(Vote::First(fv)));
                    for to in 1..=n {
                        if to == id {
                            continue;
                        }
                        let bytes = if self.split.lower_half(to, n) {
                            original.clone()
                        } else {
                            encode_message(&self.split.alt_first_vote(slot, parent))
                        };
                        out.push(AdvAction::Send { to, bytes });
                    }
                }
                other => out.extend(self.shell.fan_out(&[other])),
            }
        }
        out
    }
}

impl Adversary for VoteSplit {
    fn start(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.start(now);
        self.transform(actions)
    }
    fn on_deliver(&mut self, now: Time, from: ReplicaId, bytes: &[u8]) -> Vec<AdvAction> {
        let actions = self.shell.deliver(now, from, bytes.to_vec());
        self.transform(actions)
    }
    fn on_wake(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.wake(now);
        self.transform(actions)
    }
}

/// Seeded chaos. Baseline honest behavior with randomized drops,
/// duplicates, garbage, replays of previously seen messages, and
/// occasional first-vote splits.
struct ByzantineRandom {
    rng: ChaCha20Rng,
    seen: Vec<Vec<u8>>,
    split: SplitCrafter,
    shell: HonestShell,
}

const SEEN_CAP: usize = 64;

impl ByzantineRandom {
    fn remember(&mut self, bytes: &[u8]) {
        if self.seen.len() == SEEN_CAP {
            self.seen.remove(0);
        }
        self.seen.push(bytes.to_vec());
    }

    fn random_recipient(&mut self) -> ReplicaId {
        let n = self.shell.n;
        loop {
            let to = self.rng.gen_range(1..=n);
            if to != self.shell.id {
                return to;
            }
        }
    }

    fn garbage(&mut self) -> Vec<u8> {
        let len = self.rng.gen_range(1..64);
        (0..len).map(|_| self.rng.gen()).collect()
    }

    fn transform(&mut self, actions: Vec<OutboundAction>) -> Vec<AdvAction> {
        let mut out = Vec::new();
        for action in actions {
            // Wakes always pass: a fully wedged adversary is just Silent.
            if let OutboundAction::ScheduleWake(at) = action {
                out.push(AdvAction::Wake(at));
                continue;
            }
            // First votes occasionally split, independent of the dice below.
            if let OutboundAction::Broadcast(Message::Vote(Vote::First(fv))) = &action {
                if !fv.block().is_timeout() && self.rng.gen_bool(0.3) {
                    let slot = fv.block().slot;
                    let parent = fv.block().parent;
                    let original = encode_message(&Message::Vote(Vote::First(fv.clone())));
                    let n = self.shell.n;
                    for to in 1..=n {
                        if to == self.shell.id {
                            continue;
                        }
                        let bytes = if self.rng.gen_bool(0.5) {
                            original.clone()
                        } else {
                            encode_message(&self.split.alt_first_vote(slot, parent))
                        };
                        out.push(AdvAction::Send { to, bytes });
                    }
                    continue;
                }
            }
            for adv in self.shell.fan_out(&[action]) {
                match adv {
                    AdvAction::Send { to, bytes } => {
                        let roll = self.rng.gen_range(0u32..100);
                        match roll {
                            0..=54 => {
                                self.remember(&bytes);
                                out.push(AdvAction::Send { to, bytes });
                            }
                            55..=69 => {} // withhold
                            70..=79 => {
                                let dup = self.random_recipient();
                                self.remember(&bytes);
                                out.push(AdvAction::Send {
                                    to,
                                    bytes: bytes.clone(),
                                });
                                out.push(AdvAction::Send { to: dup, bytes });
                            }
                            80..=89 => {
                                let garbage = self.garbage();
                                out.push(AdvAction::Send { to, bytes: garbage });
                            }
                            _ => {
                                out.push(AdvAction::Send {
                                    to,
                                    bytes: bytes.clone(),
                                });
                                if !self.seen.is_empty() {
                                    let pick = self.rng.gen_range(0..self.seen.len());
                                    let replayed = self.seen[pick].clone();
                                    let to = self.random_recipient();
                                    out.push(AdvAction::Send {
                                        to,
                                        bytes: replayed,
                                    });
                                }
                            }
                        }
                    }
                    wake => out.push(wake),
                }
            }
        }
        out
    }
}

impl Adversary for ByzantineRandom {
    fn start(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.start(now);
        self.transform(actions)
    }
    fn on_deliver(&mut self, now: Time, from: ReplicaId, bytes: &[u8]) -> Vec<AdvAction> {
        self.remember(bytes);
        let actions = self.shell.deliver(now, from, bytes.to_vec());
        self.transform(actions)
    }
    fn on_wake(&mut self, now: Time) -> Vec<AdvAction> {
        let actions = self.shell.wake(now);
        self.transform(actions)
    }
}
