//! The replica main loop as a deterministic event-driven state machine.
//!
//! Events (message deliveries and timer wakes) go in; outbound actions
//! (sends, broadcasts, finalization notices, flags, wake requests) come out.
//! After ingesting an event the replica re-evaluates all of its guards in a
//! fixed order until none fires:
//!
//! 1. exit the slot if the tree holds a block for it (emitting a
//!    finalization vote when this replica notarized nothing else);
//! 2. exit the slot on a pooled timeout certificate;
//! 3. propose, if leader and not yet proposed;
//! 4. first-vote a valid leader proposal;
//! 5. first-vote the timeout block once the slot timer expires;
//! 6. (first-vote recording happens inside the pool on admission);
//! 7. take a second look at a block with `f+p+1` first votes whose parent
//!    is in the tree, reconstructing and notarizing it;
//! 8. cast the special timeout vote once
//!    `allVotes - maxVotes >= f+p+1` proves no fast finalization is
//!    possible.
//!
//! The fixed order makes runs reproducible: identical event sequences yield
//! identical action sequences. Broadcasts loop back to the sender with zero
//! delay (the simulator re-delivers them), so a replica's own votes enter
//! its pool through the same path as everyone else's.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::Arc;

use crate::blocktree::{BlockTree, FinalKind, FinalizationState, LogEntry};
use crate::codec;
use crate::crypto::{KeyRegistry, SecretKey};
use crate::hash::{hash_domain, Digest};
use crate::pool::Pool;
use crate::types::{
    make_final_vote, make_first_vote, make_notar_vote, validate_vote, verify_certificate_object,
    Block, BlockProposal, CertKind, CertificateObject, Message, ProtocolParams, ReplicaId, Slot,
    Time, Vote,
};
use crate::wire;

/// Leader schedule: round-robin or a seeded pseudo-random sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    RoundRobin,
    Seeded(u64),
}

impl Rotation {
    pub fn leader(&self, n: u16, slot: Slot) -> ReplicaId {
        match self {
            Rotation::RoundRobin => ((slot - 1) % n as u64) as u16 + 1,
            Rotation::Seeded(seed) => {
                let digest =
                    hash_domain("kudzu:leader", &[&seed.to_le_bytes(), &slot.to_le_bytes()]);
                let word = u64::from_le_bytes(digest.0[..8].try_into().unwrap());
                (word % n as u64) as u16 + 1
            }
        }
    }
}

/// Produces the payload a leader proposes for a slot.
pub trait PayloadSource: Send {
    fn payload(&mut self, slot: Slot) -> Vec<u8>;
}

/// Deterministic pseudo-random payloads of a fixed size from `(seed, slot)`.
pub struct SeededPayloads {
    pub seed: u64,
    pub size: usize,
}

impl PayloadSource for SeededPayloads {
    fn payload(&mut self, slot: Slot) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size);
        let mut counter = 0u64;
        while out.len() < self.size {
            let block = hash_domain(
                "kudzu:payload",
                &[
                    &self.seed.to_le_bytes(),
                    &slot.to_le_bytes(),
                    &counter.to_le_bytes(),
                ],
            );
            let take = (self.size - out.len()).min(32);
            out.extend_from_slice(&block.0[..take]);
            counter += 1;
        }
        out
    }
}

/// Payload validity predicate over (chain payloads genesis..parent, candidate).
pub type Validity = Box<dyn Fn(&[&[u8]], &[u8]) -> bool + Send + Sync>;

pub fn accept_all_payloads() -> Validity {
    Box::new(|_, _| true)
}

#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub id: ReplicaId,
    pub params: ProtocolParams,
    /// How long a replica waits in a slot before first-voting the timeout
    /// block.
    pub delta_timeout: u64,
    pub rotation: Rotation,
}

/// What the event loop feeds a replica.
#[derive(Clone, Debug)]
pub enum InboundEvent {
    /// Raw bytes from an authenticated channel. Undecodable or invalid
    /// input is dropped and the channel's sender flagged.
    Message { from: ReplicaId, bytes: Vec<u8> },
    /// Timer wake; guards consult the clock themselves.
    Timer,
}

/// What a replica asks its environment to do.
#[derive(Clone, Debug)]
pub enum OutboundAction {
    /// Point-to-point send (block proposals carry per-recipient fragments).
    SendTo(ReplicaId, Message),
    /// Delivery to all `n` replicas, including the sender itself.
    Broadcast(Message),
    /// Newly finalized log suffix, ancestor-first.
    Finalized(Vec<LogEntry>),
    /// Advisory misbehavior flag.
    Flag(ReplicaId),
    /// Request a timer event no later than the given time.
    ScheduleWake(Time),
}

/// Per-slot emission counters backing the vote-discipline self-audit.
#[derive(Default)]
struct EmissionAudit {
    first_votes: usize,
    timeout_notar_votes: usize,
    final_votes: usize,
    non_timeout_notar_blocks: BTreeSet<Digest>,
}

/// Cap on stored proposals per slot. An honest leader sends exactly one;
/// anything above the first is equivocation evidence, and the cap just
/// bounds memory against a spamming leader.
const MAX_STORED_PROPOSALS: usize = 8;

pub struct Replica {
    cfg: ReplicaConfig,
    registry: Arc<KeyRegistry>,
    key: SecretKey,
    payloads: Box<dyn PayloadSource>,
    validity: Validity,

    pool: Pool,
    tree: BlockTree,
    finalization: FinalizationState,

    now: Time,
    slot: Slot,
    t_start: Time,
    proposed: bool,
    first_voted: bool,
    /// Blocks (by hash, timeout included) this replica notarization-voted in
    /// the current slot.
    notarized: BTreeSet<Digest>,
    /// Blocks already reconsidered via guard 7 in the current slot.
    second_look: BTreeSet<Digest>,
    /// Parent for the next proposal; `None` is genesis.
    parent_tip: Option<Block>,
    /// Structurally valid proposals from each slot's leader, arrival order.
    proposals: BTreeMap<Slot, Vec<BlockProposal>>,
    audit: EmissionAudit,
    /// Senders flagged for undecodable or invalid wire input; the pool
    /// tracks admission-cap flags separately.
    wire_flags: BTreeSet<ReplicaId>,
    /// Chronicles for the harness: when each slot was entered and when each
    /// block reached the tree.
    slot_entry_log: Vec<(Slot, Time)>,
    tree_add_log: Vec<(Time, Block)>,
}

impl Replica {
    pub fn new(
        cfg: ReplicaConfig,
        registry: Arc<KeyRegistry>,
        payloads: Box<dyn PayloadSource>,
        validity: Validity,
    ) -> Replica {
        cfg.params.validate().expect("invalid protocol parameters");
        assert!(cfg.id >= 1 && cfg.id <= cfg.params.n);
        let key = registry.secret_key(cfg.id);
        Replica {
            pool: Pool::new(cfg.params),
            tree: BlockTree::new(),
            finalization: FinalizationState::new(),
            registry,
            key,
            payloads,
            validity,
            now: 0,
            slot: 0,
            t_start: 0,
            proposed: false,
            first_voted: false,
            notarized: BTreeSet::new(),
            second_look: BTreeSet::new(),
            parent_tip: None,
            proposals: BTreeMap::new(),
            cfg,
            audit: EmissionAudit::default(),
            wire_flags: BTreeSet::new(),
            slot_entry_log: Vec::new(),
            tree_add_log: Vec::new(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn current_slot(&self) -> Slot {
        self.slot
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn tree(&self) -> &BlockTree {
        &self.tree
    }

    pub fn finalized_log(&self) -> &[LogEntry] {
        self.finalization.log()
    }

    /// Every replica this one has flagged: wire-level validation failures
    /// plus the pool's admission-cap flags. Advisory, for the harness.
    pub fn flagged(&self) -> BTreeSet<ReplicaId> {
        let mut all = self.wire_flags.clone();
        all.extend(self.pool.flagged().iter().copied());
        all
    }

    /// `(slot, entry time)` pairs, one per slot entered, ascending.
    pub fn slot_entry_log(&self) -> &[(Slot, Time)] {
        &self.slot_entry_log
    }

    /// `(time, block)` pairs for every tree admission, in order.
    pub fn tree_add_log(&self) -> &[(Time, Block)] {
        &self.tree_add_log
    }

    pub fn leader_of(&self, slot: Slot) -> ReplicaId {
        self.cfg.rotation.leader(self.cfg.params.n, slot)
    }

    /// Enters slot 1 and runs the guards. Must be called exactly once,
    /// before any event is delivered.
    pub fn start(&mut self, now: Time) -> Vec<OutboundAction> {
        assert_eq!(self.slot, 0, "start is called once");
        self.now = now;
        let mut actions = Vec::new();
        self.enter_slot(1, &mut actions);
        self.run_guards(&mut actions);
        actions
    }

    /// Feeds one event through ingestion, pool/tree settlement, and the
    /// guard loop. Timestamps must be non-decreasing.
    pub fn handle_event(&mut self, now: Time, event: InboundEvent) -> Vec<OutboundAction> {
        assert!(self.slot >= 1, "replica not started");
        debug_assert!(now >= self.now, "clock ran backwards");
        self.now = now;
        let mut actions = Vec::new();
        match event {
            InboundEvent::Timer => {}
            InboundEvent::Message { from, bytes } => match wire::decode_message(&bytes) {
                Err(_) => self.flag(from, &mut actions),
                Ok(message) => self.ingest(from, message, &mut actions),
            },
        }
        self.settle(&mut actions);
        self.run_guards(&mut actions);
        actions
    }

    fn ingest(&mut self, from: ReplicaId, message: Message, actions: &mut Vec<OutboundAction>) {
        match message {
            Message::Proposal(bp) => self.ingest_proposal(from, bp, actions),
            Message::Vote(vote) => self.ingest_vote(from, vote, actions),
            Message::Certificate(co) => self.ingest_certificate(from, co, actions),
        }
    }

    fn ingest_proposal(
        &mut self,
        from: ReplicaId,
        bp: BlockProposal,
        actions: &mut Vec<OutboundAction>,
    ) {
        let block = bp.block;
        let slot = block.slot;
        // Structural validation; the leader-only and addressed-to-me rules
        // are part of it. Contextual conditions (parent present, timeout
        // certificates for skipped slots) are re-checked by guard 4.
        let structurally_ok = block.structurally_valid()
            && !block.is_timeout()
            && slot >= 1
            && from == self.leader_of(slot)
            && bp.fragment.index == self.cfg.id
            && codec::verify_fragment(
                self.cfg.params.codec_params(),
                &block.tag.expect("non-timeout"),
                &bp.fragment,
            );
        if !structurally_ok {
            self.flag(from, actions);
            return;
        }
        if slot < self.slot {
            // Stale: this slot was already exited.
            return;
        }
        let stored = self.proposals.entry(slot).or_default();
        if stored.iter().any(|p| p.block.hash() == block.hash()) {
            return;
        }
        if !stored.is_empty() {
            // A second distinct proposal for one slot is equivocation.
            actions.push(OutboundAction::Flag(from));
        }
        if stored.len() < MAX_STORED_PROPOSALS {
            stored.push(bp);
        }
    }

    fn ingest_vote(&mut self, from: ReplicaId, vote: Vote, actions: &mut Vec<OutboundAction>) {
        if !validate_vote(&self.registry, &self.cfg.params, &vote) {
            self.flag(from, actions);
            return;
        }
        let effect = self.pool.add_vote(&vote);
        for id in effect.flagged {
            actions.push(OutboundAction::Flag(id));
        }
        self.process_new_certificates(effect.new_certificates, actions);
    }

    fn ingest_certificate(
        &mut self,
        from: ReplicaId,
        co: CertificateObject,
        actions: &mut Vec<OutboundAction>,
    ) {
        if !verify_certificate_object(&self.registry, &self.cfg.params, &co) {
            self.flag(from, actions);
            return;
        }
        let effect = self.pool.add_certificate(&co);
        self.process_new_certificates(effect.new_certificates, actions);
    }

    /// Certificates that just entered the pool (assembled locally or
    /// received fresh): broadcast each one and apply its consequences.
    fn process_new_certificates(
        &mut self,
        certs: Vec<CertificateObject>,
        actions: &mut Vec<OutboundAction>,
    ) {
        for co in certs {
            actions.push(OutboundAction::Broadcast(Message::Certificate(co.clone())));
            match co.kind {
                CertKind::Notar => self.tree.note_certified(co.block),
                CertKind::Timeout => {}
                CertKind::FastFinal | CertKind::Final => {
                    let kind = if co.kind == CertKind::FastFinal {
                        FinalKind::Fast
                    } else {
                        FinalKind::Slow
                    };
                    let suffix = self
                        .finalization
                        .mark_finalized(&self.tree, co.block.slot, co.block.hash(), kind, self.now)
                        .unwrap_or_else(|fault| {
                            panic!("replica {}: consistency fault: {fault}", self.cfg.id)
                        });
                    if !suffix.is_empty() {
                        actions.push(OutboundAction::Finalized(suffix));
                    }
                }
            }
        }
    }

    /// Tree admissions and deferred finalizations, to a fixpoint.
    fn settle(&mut self, actions: &mut Vec<OutboundAction>) {
        let added = self
            .tree
            .try_settle(&self.pool, &*self.validity)
            .unwrap_or_else(|fault| {
                panic!("replica {}: consistency fault: {fault}", self.cfg.id)
            });
        for block in &added {
            self.tree_add_log.push((self.now, *block));
        }
        if !added.is_empty() {
            let suffix = self
                .finalization
                .settle_deferred(&self.tree, self.now)
                .unwrap_or_else(|fault| {
                    panic!("replica {}: consistency fault: {fault}", self.cfg.id)
                });
            if !suffix.is_empty() {
                actions.push(OutboundAction::Finalized(suffix));
            }
        }
    }

    fn enter_slot(&mut self, slot: Slot, actions: &mut Vec<OutboundAction>) {
        self.slot = slot;
        self.t_start = self.now;
        self.slot_entry_log.push((slot, self.now));
        self.proposed = false;
        self.first_voted = false;
        self.notarized.clear();
        self.second_look.clear();
        self.audit = EmissionAudit::default();
        // Proposals for exited slots can never be first-voted again.
        self.proposals.retain(|s, _| *s >= slot);
        // One wake per slot; the guard re-checks the clock, so stale wakes
        // from earlier slots are harmless. The +1 realizes the strict
        // `clock() > T_start + delta_timeout` comparison on an integer clock.
        actions.push(OutboundAction::ScheduleWake(
            self.t_start + self.cfg.delta_timeout + 1,
        ));
    }

    fn run_guards(&mut self, actions: &mut Vec<OutboundAction>) {
        loop {
            // Guard 1: a block for this slot reached the tree; exit through
            // it. Deterministic tie-break if misbehavior produced several.
            if let Some(tip) = self.tree.tip_after_exit(self.slot).copied() {
                let hash = tip.hash();
                if self.notarized.iter().all(|h| *h == hash) {
                    self.emit_final_vote(tip, actions);
                }
                self.parent_tip = Some(tip);
                self.enter_slot(self.slot + 1, actions);
                continue;
            }

            // Guard 2: the slot timed out; move on without a block.
            if self.pool.timeout_cert(self.slot).is_some() {
                self.enter_slot(self.slot + 1, actions);
                continue;
            }

            // Guard 3: propose.
            if !self.proposed && self.leader_of(self.slot) == self.cfg.id {
                self.proposed = true;
                let (block, fragments) = self.make_proposal();
                for (pos, fragment) in fragments.into_iter().enumerate() {
                    actions.push(OutboundAction::SendTo(
                        pos as ReplicaId + 1,
                        Message::Proposal(BlockProposal { block, fragment }),
                    ));
                }
                continue;
            }

            // Guard 4: first-vote a valid proposal from the slot leader.
            if !self.first_voted {
                if let Some(bp) = self.first_ready_proposal() {
                    self.first_voted = true;
                    self.emit_first_vote(bp.block, Some(bp.fragment), actions);
                    continue;
                }
            }

            // Guard 5: slot timer expired; first-vote the timeout block.
            if !self.first_voted && self.now > self.t_start + self.cfg.delta_timeout {
                self.first_voted = true;
                self.emit_first_vote(Block::timeout(self.slot), None, actions);
                continue;
            }

            // Guard 7: second look at a block with f+p+1 first votes.
            if self.first_voted {
                let candidate = self
                    .pool
                    .many_votes(self.slot)
                    .into_iter()
                    .find(|block| {
                        !self.second_look.contains(&block.hash())
                            && match block.parent {
                                None => true,
                                Some(parent) => self.tree.contains(&parent),
                            }
                    });
                if let Some(block) = candidate {
                    self.second_look.insert(block.hash());
                    self.reconstruct_and_notarize(block, actions);
                    continue;
                }
            }

            // Guard 8: enough first votes disagree that no fast
            // finalization can happen; vote timeout so the slot can end.
            // The trigger is monotone within a slot.
            if self.first_voted {
                let all = self.pool.all_votes(self.slot);
                let max = self.pool.max_votes(self.slot);
                let timeout_hash = Block::timeout(self.slot).hash();
                if all - max >= self.cfg.params.reconstruct_threshold() as usize
                    && !self.notarized.contains(&timeout_hash)
                {
                    self.emit_notar_vote(Block::timeout(self.slot), None, actions);
                    continue;
                }
            }

            break;
        }
    }

    /// Reconstructs the payload of `block` from pooled fragments and
    /// notarizes it if valid; otherwise notarizes the timeout block. Both
    /// sides are no-ops when the respective block was already notarized.
    fn reconstruct_and_notarize(&mut self, block: Block, actions: &mut Vec<OutboundAction>) {
        let hash = block.hash();
        let params = self.cfg.params.codec_params();
        let need = params.d as usize;
        let mut fragments = self.pool.fragments_for(self.slot, &hash);
        let payload = if fragments.len() < need {
            // Reachable only through misbehavior: a corrupt first-voter can
            // exhaust its notarization-vote cap on decoy blocks so that the
            // fragment inside its first vote was dropped at admission. The
            // first votes still count, the fragments do not; reconstruction
            // fails and the timeout branch below applies.
            None
        } else {
            fragments.truncate(need);
            let tag = block.tag.expect("many_votes never yields timeout blocks");
            codec::decode(params, &tag, &fragments)
                .expect("pooled fragments satisfy the decode contract")
        };

        let valid_payload = payload.filter(|payload| {
            let parent_path = match block.parent {
                None => vec![],
                Some(parent) => self
                    .tree
                    .path_payloads(&parent)
                    .expect("guard 7 checked the parent is in the tree"),
            };
            (self.validity)(&parent_path, payload)
        });

        match valid_payload {
            Some(payload) => {
                if !self.notarized.contains(&hash) {
                    // Re-encoding the payload recovers this replica's own
                    // certified fragment even if it never saw the proposal.
                    let (tag, frags) =
                        codec::encode(params, &payload).expect("params validated at startup");
                    debug_assert_eq!(tag.root, block.tag.unwrap().root);
                    let own = frags[(self.cfg.id - 1) as usize].clone();
                    self.emit_notar_vote(block, Some(own), actions);
                }
            }
            None => {
                let timeout = Block::timeout(self.slot);
                if !self.notarized.contains(&timeout.hash()) {
                    self.emit_notar_vote(timeout, None, actions);
                }
            }
        }
    }

    fn make_proposal(&mut self) -> (Block, Vec<codec::CertifiedFragment>) {
        let payload = self.payloads.payload(self.slot);
        let (tag, fragments) = codec::encode(self.cfg.params.codec_params(), &payload)
            .expect("params validated at startup");
        let block = Block::new(self.slot, tag, self.parent_tip.map(|b| b.hash()));
        (block, fragments)
    }

    /// First stored proposal for the current slot whose contextual
    /// conditions hold: the parent is in the tree in an earlier slot and
    /// every skipped slot in between has a pooled timeout certificate.
    /// Proposals failing only these checks stay pending and are re-examined
    /// on the next guard pass.
    fn first_ready_proposal(&self) -> Option<BlockProposal> {
        let stored = self.proposals.get(&self.slot)?;
        stored.iter().find(|bp| self.proposal_ready(bp)).cloned()
    }

    fn proposal_ready(&self, bp: &BlockProposal) -> bool {
        let parent_slot = match bp.block.parent {
            None => 0,
            Some(parent_hash) => match self.tree.block(&parent_hash) {
                None => return false,
                Some(parent) => parent.slot,
            },
        };
        if parent_slot >= bp.block.slot {
            return false;
        }
        (parent_slot + 1..bp.block.slot).all(|s| self.pool.timeout_cert(s).is_some())
    }

    fn flag(&mut self, suspect: ReplicaId, actions: &mut Vec<OutboundAction>) {
        self.wire_flags.insert(suspect);
        actions.push(OutboundAction::Flag(suspect));
    }

    fn emit_first_vote(
        &mut self,
        block: Block,
        fragment: Option<codec::CertifiedFragment>,
        actions: &mut Vec<OutboundAction>,
    ) {
        self.audit.first_votes += 1;
        assert!(self.audit.first_votes <= 1, "vote discipline: first votes");
        self.note_notar_emission(&block);
        let vote = make_first_vote(&self.key, &self.cfg.params, self.cfg.id, block, fragment);
        self.notarized.insert(block.hash());
        actions.push(OutboundAction::Broadcast(Message::Vote(Vote::First(vote))));
    }

    fn emit_notar_vote(
        &mut self,
        block: Block,
        fragment: Option<codec::CertifiedFragment>,
        actions: &mut Vec<OutboundAction>,
    ) {
        self.note_notar_emission(&block);
        let vote = make_notar_vote(&self.key, &self.cfg.params, self.cfg.id, block, fragment);
        self.notarized.insert(block.hash());
        actions.push(OutboundAction::Broadcast(Message::Vote(Vote::Notar(vote))));
    }

    fn emit_final_vote(&mut self, block: Block, actions: &mut Vec<OutboundAction>) {
        self.audit.final_votes += 1;
        assert!(self.audit.final_votes <= 1, "vote discipline: final votes");
        let vote = make_final_vote(&self.key, &self.cfg.params, self.cfg.id, block);
        actions.push(OutboundAction::Broadcast(Message::Vote(Vote::Final(vote))));
    }

    fn note_notar_emission(&mut self, block: &Block) {
        if block.is_timeout() {
            self.audit.timeout_notar_votes += 1;
            assert!(
                self.audit.timeout_notar_votes <= 1,
                "vote discipline: timeout votes"
            );
        } else {
            self.audit.non_timeout_notar_blocks.insert(block.hash());
            // 1 first vote + floor(n / (f+p+1)) second looks; equals 3 under
            // the n < 3(f+p+1) assumption.
            let bound = 1 + (self.cfg.params.n / self.cfg.params.reconstruct_threshold()) as usize;
            assert!(
                self.audit.non_timeout_notar_blocks.len() <= bound.max(3),
                "vote discipline: non-timeout notarization votes"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CertifiedFragment;

    struct Net {
        registry: Arc<KeyRegistry>,
        params: ProtocolParams,
    }

    impl Net {
        fn new(n: u16, f: u16, p: u16) -> Net {
            let params = ProtocolParams {
                n,
                f,
                p,
                instance: 42,
            };
            Net {
                registry: Arc::new(KeyRegistry::from_seed(7, n)),
                params,
            }
        }

        fn replica(&self, id: ReplicaId, delta_timeout: u64) -> Replica {
            Replica::new(
                ReplicaConfig {
                    id,
                    params: self.params,
                    delta_timeout,
                    rotation: Rotation::RoundRobin,
                },
                self.registry.clone(),
                Box::new(SeededPayloads { seed: 5, size: 64 }),
                accept_all_payloads(),
            )
        }

        fn block(&self, slot: Slot, payload: &[u8], parent: Option<Digest>) -> (Block, Vec<CertifiedFragment>) {
            let (tag, frags) = codec::encode(self.params.codec_params(), payload).unwrap();
            (Block::new(slot, tag, parent), frags)
        }

        fn deliver(&self, replica: &mut Replica, now: Time, from: ReplicaId, msg: &Message) -> Vec<OutboundAction> {
            replica.handle_event(
                now,
                InboundEvent::Message {
                    from,
                    bytes: wire::encode_message(msg),
                },
            )
        }

        fn first_vote_msg(&self, signer: ReplicaId, block: Block, frags: &[CertifiedFragment]) -> Message {
            let frag = if block.is_timeout() {
                None
            } else {
                Some(frags[(signer - 1) as usize].clone())
            };
            Message::Vote(Vote::First(make_first_vote(
                &self.registry.secret_key(signer),
                &self.params,
                signer,
                block,
                frag,
            )))
        }

        /// Feeds a replica's own broadcasts back to it, as the network loop
        /// does, and returns everything it emitted transitively.
        fn loopback(&self, replica: &mut Replica, now: Time, actions: Vec<OutboundAction>) -> Vec<OutboundAction> {
            let mut all = Vec::new();
            let mut queue = actions;
            while !queue.is_empty() {
                let mut next = Vec::new();
                for action in &queue {
                    let echo = match action {
                        OutboundAction::Broadcast(msg) => {
                            Some(self.deliver(replica, now, replica.id(), msg))
                        }
                        OutboundAction::SendTo(to, msg) if *to == replica.id() => {
                            Some(self.deliver(replica, now, replica.id(), msg))
                        }
                        _ => None,
                    };
                    if let Some(more) = echo {
                        next.extend(more);
                    }
                }
                all.extend(queue);
                queue = next;
            }
            all
        }
    }

    fn broadcast_votes(actions: &[OutboundAction]) -> Vec<&Vote> {
        actions
            .iter()
            .filter_map(|a| match a {
                OutboundAction::Broadcast(Message::Vote(v)) => Some(v),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn leader_proposes_on_start_with_distinct_fragments() {
        let net = Net::new(4, 1, 0);
        let mut leader = net.replica(1, 30);
        let actions = leader.start(0);
        let sends: Vec<(ReplicaId, &BlockProposal)> = actions
            .iter()
            .filter_map(|a| match a {
                OutboundAction::SendTo(to, Message::Proposal(bp)) => Some((*to, bp)),
                _ => None,
            })
            .collect();
        assert_eq!(sends.len(), 4);
        for (to, bp) in &sends {
            assert_eq!(bp.fragment.index, *to, "fragment addressed per recipient");
            assert_eq!(bp.block.slot, 1);
            assert_eq!(bp.block.parent, None);
        }
        // All four fragments are distinct.
        let datas: BTreeSet<Vec<u8>> = sends.iter().map(|(_, bp)| bp.fragment.data.clone()).collect();
        assert!(datas.len() > 1 || sends[0].1.fragment.data.is_empty());
    }

    #[test]
    fn valid_proposal_triggers_first_vote_with_own_fragment() {
        let net = Net::new(4, 1, 0);
        let mut leader = net.replica(1, 30);
        let proposals = leader.start(0);
        let to_two = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(2, msg) => Some(msg.clone()),
                _ => None,
            })
            .unwrap();

        let mut follower = net.replica(2, 30);
        follower.start(0);
        let actions = net.deliver(&mut follower, 10, 1, &to_two);
        let votes = broadcast_votes(&actions);
        assert_eq!(votes.len(), 1);
        match votes[0] {
            Vote::First(fv) => {
                assert_eq!(fv.signer(), 2);
                assert!(!fv.block().is_timeout());
                assert_eq!(fv.inner.fragment.as_ref().unwrap().index, 2);
            }
            other => panic!("expected a first vote, got {other:?}"),
        }
    }

    #[test]
    fn proposal_from_non_leader_is_flagged() {
        let net = Net::new(4, 1, 0);
        let mut leader = net.replica(1, 30);
        let proposals = leader.start(0);
        let to_two = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(2, msg) => Some(msg.clone()),
                _ => None,
            })
            .unwrap();
        let mut follower = net.replica(2, 30);
        follower.start(0);
        // Same message, but delivered over replica 3's channel.
        let actions = net.deliver(&mut follower, 10, 3, &to_two);
        assert!(matches!(actions[..], [OutboundAction::Flag(3)]));
        assert!(broadcast_votes(&actions).is_empty());
    }

    #[test]
    fn proposal_with_bad_fragment_is_flagged() {
        let net = Net::new(4, 1, 0);
        let mut leader = net.replica(1, 30);
        let proposals = leader.start(0);
        let mut bp = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(2, Message::Proposal(bp)) => Some(bp.clone()),
                _ => None,
            })
            .unwrap();

        let mut follower = net.replica(2, 30);
        follower.start(0);

        // Fragment addressed to someone else.
        let mut wrong_index = bp.clone();
        wrong_index.fragment = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(3, Message::Proposal(other)) => {
                    Some(other.fragment.clone())
                }
                _ => None,
            })
            .unwrap();
        let actions = net.deliver(&mut follower, 10, 1, &Message::Proposal(wrong_index));
        assert!(matches!(actions[..], [OutboundAction::Flag(1)]));

        // Corrupted validation path.
        bp.fragment.data[0] ^= 1;
        let actions = net.deliver(&mut follower, 11, 1, &Message::Proposal(bp));
        assert!(matches!(actions[..], [OutboundAction::Flag(1)]));
        assert!(broadcast_votes(&actions).is_empty());
    }

    #[test]
    fn timer_expiry_first_votes_timeout() {
        let net = Net::new(4, 1, 0);
        let mut follower = net.replica(2, 30);
        follower.start(0);
        // At exactly t_start + delta the strict comparison holds nothing.
        let at_deadline = follower.handle_event(30, InboundEvent::Timer);
        assert!(broadcast_votes(&at_deadline).is_empty());
        let past_deadline = follower.handle_event(31, InboundEvent::Timer);
        let votes = broadcast_votes(&past_deadline);
        assert_eq!(votes.len(), 1);
        match votes[0] {
            Vote::First(fv) => {
                assert!(fv.block().is_timeout());
                assert!(fv.inner.fragment.is_none());
            }
            other => panic!("expected timeout first vote, got {other:?}"),
        }
    }

    #[test]
    fn skip_trigger_counter_example() {
        // n=6, f=1, p=1 (threshold f+p+1 = 3). Replica 6 first votes B1;
        // first votes seen: own B1, two on B2, one on B3, one on timeout.
        // allVotes - maxVotes = 5 - 2 = 3 fires the special timeout vote.
        let net = Net::new(6, 1, 1);
        let (b1, f1) = net.block(1, b"block one", None);
        let (b2, f2) = net.block(1, b"block two", None);
        let (b3, f3) = net.block(1, b"block three", None);

        let mut replica = net.replica(6, 1000);
        replica.start(0);

        // Leader of slot 1 is replica 1; hand replica 6 a valid proposal
        // for B1 so it first-votes it.
        let proposal = Message::Proposal(BlockProposal {
            block: b1,
            fragment: f1[5].clone(),
        });
        let actions = net.deliver(&mut replica, 5, 1, &proposal);
        let actions = net.loopback(&mut replica, 5, actions);
        assert!(matches!(
            broadcast_votes(&actions)[..],
            [Vote::First(_)]
        ));

        let mut emitted = Vec::new();
        for (signer, block, frags) in [(2u16, b2, &f2), (3, b2, &f2), (4, b3, &f3)] {
            let msg = net.first_vote_msg(signer, block, frags);
            let actions = net.deliver(&mut replica, 6, signer, &msg);
            emitted.extend(net.loopback(&mut replica, 6, actions));
        }
        assert_eq!(replica.pool().all_votes(1), 4);
        assert!(broadcast_votes(&emitted).is_empty(), "no trigger at 4-2=2");

        let timeout_fv = net.first_vote_msg(5, Block::timeout(1), &[]);
        let actions = net.deliver(&mut replica, 7, 5, &timeout_fv);
        let actions = net.loopback(&mut replica, 7, actions);
        let votes = broadcast_votes(&actions);
        assert_eq!(votes.len(), 1, "allVotes=5, maxVotes=2 fires the skip vote");
        match votes[0] {
            Vote::Notar(nv) => assert!(nv.block.is_timeout()),
            other => panic!("expected timeout notarization vote, got {other:?}"),
        }
    }

    #[test]
    fn second_look_notarizes_after_timeout_first_vote() {
        // Replica first-voted timeout; then f+p+1 first votes for a valid
        // block arrive and it reconstructs and notarizes that block,
        // recovering its own fragment by re-encoding.
        let net = Net::new(4, 1, 0);
        let (block, frags) = net.block(1, b"late block", None);

        let mut replica = net.replica(2, 30);
        replica.start(0);
        let timeout_actions = replica.handle_event(31, InboundEvent::Timer);
        let timeout_actions = net.loopback(&mut replica, 31, timeout_actions);
        assert!(matches!(
            broadcast_votes(&timeout_actions)[..],
            [Vote::First(fv)] if fv.block().is_timeout()
        ));

        let mut collected = Vec::new();
        for signer in [1u16, 3] {
            let msg = net.first_vote_msg(signer, block, &frags);
            let actions = net.deliver(&mut replica, 32, signer, &msg);
            collected.extend(net.loopback(&mut replica, 32, actions));
        }
        // The notarization vote lands, its loopback completes the
        // certificate, the block enters the tree, and the replica exits into
        // slot 2 (where, as its leader, it proposes and first-votes). Only
        // the slot-1 votes matter here.
        let votes = broadcast_votes(&collected);
        let slot1: Vec<_> = votes
            .iter()
            .filter(|v| match v {
                Vote::Notar(nv) => nv.block.slot == 1,
                Vote::First(fv) => fv.block().slot == 1,
                Vote::Final(fv) => fv.block.slot == 1,
            })
            .collect();
        assert_eq!(slot1.len(), 1);
        match slot1[0] {
            Vote::Notar(nv) => {
                assert_eq!(nv.block.hash(), block.hash());
                let frag = nv.fragment.as_ref().unwrap();
                assert_eq!(frag.index, 2, "own fragment recovered by re-encoding");
                assert_eq!(frag.data, frags[1].data);
            }
            other => panic!("expected notarization vote, got {other:?}"),
        }
        assert_eq!(replica.current_slot(), 2);
    }

    #[test]
    fn second_look_skips_own_first_voted_block() {
        let net = Net::new(4, 1, 0);
        let mut leader = net.replica(1, 30);
        let proposals = leader.start(0);
        let fragment_for = |id: ReplicaId| {
            proposals
                .iter()
                .find_map(|a| match a {
                    OutboundAction::SendTo(to, Message::Proposal(bp)) if *to == id => {
                        Some(bp.clone())
                    }
                    _ => None,
                })
                .unwrap()
        };
        let own = fragment_for(1);
        let actions = net.deliver(&mut leader, 0, 1, &Message::Proposal(own.clone()));
        let actions = net.loopback(&mut leader, 0, actions);
        assert!(matches!(broadcast_votes(&actions)[..], [Vote::First(_)]));

        // Replica 2's first vote for the same block brings the count to
        // f+p+1 = 2: guard 7 fires, but the block is already in the
        // leader's notarized set, so nothing more is emitted.
        let for_two = fragment_for(2);
        let vote_two = Message::Vote(Vote::First(make_first_vote(
            &net.registry.secret_key(2),
            &net.params,
            2,
            for_two.block,
            Some(for_two.fragment),
        )));
        let actions = net.deliver(&mut leader, 1, 2, &vote_two);
        let actions = net.loopback(&mut leader, 1, actions);
        assert!(broadcast_votes(&actions).is_empty());
    }

    #[test]
    fn early_proposal_waits_for_parent_then_fires() {
        // A slot-2 proposal arrives while the replica is still working on
        // slot 1 and before the slot-1 block exists anywhere. It is
        // buffered as pending; once slot 1 completes and the parent is in
        // the tree, the first vote for slot 2 fires.
        let net = Net::new(4, 1, 0);
        let mut leader1 = net.replica(1, 30);
        let proposals = leader1.start(0);
        let slot1_bp = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(3, Message::Proposal(bp)) => Some(bp.clone()),
                _ => None,
            })
            .unwrap();
        let block1 = slot1_bp.block;

        // Build the slot-2 proposal chaining to block1, as leader 2 would.
        let (tag2, frags2) = codec::encode(net.params.codec_params(), b"slot two payload").unwrap();
        let block2 = Block::new(2, tag2, Some(block1.hash()));

        let mut replica = net.replica(3, 1000);
        replica.start(0);
        let early = Message::Proposal(BlockProposal {
            block: block2,
            fragment: frags2[2].clone(),
        });
        let actions = net.deliver(&mut replica, 4, 2, &early);
        assert!(
            broadcast_votes(&actions).is_empty(),
            "nothing to vote before slot 2"
        );

        // Slot 1 proposal plus two more first votes complete slot 1. The
        // voters' fragments come from re-encoding the leader's payload
        // (same deterministic source the leader used).
        let actions = net.deliver(&mut replica, 5, 1, &Message::Proposal(slot1_bp.clone()));
        net.loopback(&mut replica, 5, actions);
        let payload = SeededPayloads { seed: 5, size: 64 }.payload(1);
        let (tag, frags1) = codec::encode(net.params.codec_params(), &payload).unwrap();
        assert_eq!(tag, block1.tag.unwrap());
        let mut emitted = Vec::new();
        for signer in [1u16, 2] {
            let msg = net.first_vote_msg(signer, block1, &frags1);
            let actions = net.deliver(&mut replica, 6, signer, &msg);
            emitted.extend(net.loopback(&mut replica, 6, actions));
        }
        // Slot 1 exited; the buffered slot-2 proposal is now valid and the
        // replica first-voted it.
        assert_eq!(replica.current_slot(), 2);
        let slot2_first = broadcast_votes(&emitted).into_iter().find(|v| match v {
            Vote::First(fv) => fv.block().slot == 2,
            _ => false,
        });
        match slot2_first {
            Some(Vote::First(fv)) => {
                assert_eq!(fv.block().hash(), block2.hash());
                assert_eq!(fv.inner.fragment.as_ref().unwrap().index, 3);
            }
            other => panic!("expected buffered slot-2 first vote, got {other:?}"),
        }
    }

    #[test]
    fn spliced_block_in_second_look_votes_timeout() {
        // f+p+1 first votes arrive for a block whose tag was spliced from
        // two payloads. Reconstruction fails, so the replica votes for the
        // timeout block instead.
        let net = Net::new(4, 1, 0);
        let (tag, frags) = codec::splice_tags(
            net.params.codec_params(),
            &[0x11; 80],
            &[0x22; 80],
            &[1, 2],
        )
        .unwrap();
        let spliced = Block::new(1, tag, None);

        let mut leader = net.replica(1, 30);
        let proposals = leader.start(0);
        let own = proposals
            .iter()
            .find_map(|a| match a {
                OutboundAction::SendTo(1, msg) => Some(msg.clone()),
                _ => None,
            })
            .unwrap();
        // Leader first-votes its own honest block.
        let actions = net.deliver(&mut leader, 0, 1, &own);
        net.loopback(&mut leader, 0, actions);

        // Two first votes for the spliced block: enough for a second look.
        let mut collected = Vec::new();
        for signer in [2u16, 3] {
            let msg = net.first_vote_msg(signer, spliced, &frags);
            let actions = net.deliver(&mut leader, 1, signer, &msg);
            collected.extend(net.loopback(&mut leader, 1, actions));
        }
        let votes = broadcast_votes(&collected);
        assert_eq!(votes.len(), 1);
        match votes[0] {
            Vote::Notar(nv) => assert!(
                nv.block.is_timeout(),
                "reconstruction failure must fall back to the timeout vote"
            ),
            other => panic!("expected timeout notarization vote, got {other:?}"),
        }

        // The leader now has notarization votes for its own block and the
        // timeout block. When its own block completes the slot, the
        // finalization vote is withheld: notarized is not a subset of {B}.
        let own_block = *match &own {
            Message::Proposal(bp) => &bp.block,
            _ => unreachable!(),
        };
        let own_payload = SeededPayloads { seed: 5, size: 64 }.payload(1);
        let (tag, own_frags) = codec::encode(net.params.codec_params(), &own_payload).unwrap();
        assert_eq!(tag, own_block.tag.unwrap());
        let mut exit_actions = Vec::new();
        for signer in [2u16, 3] {
            // 2 and 3 spent their first votes on the spliced block; their
            // votes for the leader's block arrive as second-look
            // notarization votes.
            let msg = Message::Vote(Vote::Notar(make_notar_vote(
                &net.registry.secret_key(signer),
                &net.params,
                signer,
                own_block,
                Some(own_frags[(signer - 1) as usize].clone()),
            )));
            let actions = net.deliver(&mut leader, 2, signer, &msg);
            exit_actions.extend(net.loopback(&mut leader, 2, actions));
        }
        assert_eq!(leader.current_slot(), 2, "slot exited through the block");
        let final_votes = broadcast_votes(&exit_actions)
            .into_iter()
            .filter(|v| matches!(v, Vote::Final(_)))
            .count();
        assert_eq!(
            final_votes, 0,
            "a replica that notarized another block must not finalization-vote"
        );
    }

    #[test]
    fn exit_by_block_wins_over_timeout_cert_after_catch_up() {
        // A replica stuck in slot 1 accumulates slot-2 material in its
        // pool: a certified, reconstructable block B2 (genesis parent) and
        // also a timeout certificate for slot 2. When it finally advances,
        // the block exit is evaluated first: B2 becomes the proposal parent
        // and earns a finalization vote, even though the timeout
        // certificate would also have let the slot end.
        let net = Net::new(4, 1, 0);
        let mut replica = net.replica(3, 10_000);
        replica.start(0);

        let (b2, f2) = net.block(2, b"slot two block", None);
        let mut timeline = 5;
        let mut deliver_all = |replica: &mut Replica, msgs: Vec<Message>| {
            let mut out = Vec::new();
            for msg in msgs {
                let from = match &msg {
                    Message::Vote(v) => v.signer(),
                    _ => 1,
                };
                let actions = net.deliver(replica, timeline, from, &msg);
                out.extend(net.loopback(replica, timeline, actions));
                timeline += 1;
            }
            out
        };

        // Slot-2 notarization votes (certificate assembles at the third).
        let notar_msgs: Vec<Message> = [1u16, 2, 4]
            .into_iter()
            .map(|signer| {
                Message::Vote(Vote::Notar(make_notar_vote(
                    &net.registry.secret_key(signer),
                    &net.params,
                    signer,
                    b2,
                    Some(f2[(signer - 1) as usize].clone()),
                )))
            })
            .collect();
        deliver_all(&mut replica, notar_msgs);
        assert_eq!(replica.current_slot(), 1, "still waiting on slot 1");
        assert!(replica.tree().contains(&b2.hash()), "B2 settled early");

        // Slot-2 timeout certificate, built elsewhere.
        let timeout_votes: Vec<Vote> = [1u16, 2, 4]
            .into_iter()
            .map(|signer| {
                Vote::Notar(make_notar_vote(
                    &net.registry.secret_key(signer),
                    &net.params,
                    signer,
                    Block::timeout(2),
                    None,
                ))
            })
            .collect();
        let mut donor = crate::pool::Pool::new(net.params);
        let mut timeout_cert = None;
        for vote in &timeout_votes {
            let effect = donor.add_vote(vote);
            timeout_cert = effect.new_certificates.into_iter().next().or(timeout_cert);
        }
        deliver_all(
            &mut replica,
            vec![Message::Certificate(timeout_cert.unwrap())],
        );

        // Slot 1 finally times out; the replica sweeps through slot 2 via
        // the block, not the timeout certificate.
        let timeout1: Vec<Message> = [1u16, 2, 4]
            .into_iter()
            .map(|signer| {
                Message::Vote(Vote::Notar(make_notar_vote(
                    &net.registry.secret_key(signer),
                    &net.params,
                    signer,
                    Block::timeout(1),
                    None,
                )))
            })
            .collect();
        let actions = deliver_all(&mut replica, timeout1);
        assert_eq!(replica.current_slot(), 3);

        let final_votes: Vec<&Vote> = broadcast_votes(&actions)
            .into_iter()
            .filter(|v| matches!(v, Vote::Final(_)))
            .collect();
        match final_votes[..] {
            [Vote::Final(fv)] => assert_eq!(fv.block.hash(), b2.hash()),
            ref other => panic!("expected one finalization vote for B2, got {other:?}"),
        }

        // As leader of slot 3, its proposal parents B2.
        let proposal_parent = actions.iter().find_map(|a| match a {
            OutboundAction::SendTo(_, Message::Proposal(bp)) if bp.block.slot == 3 => {
                Some(bp.block.parent)
            }
            _ => None,
        });
        assert_eq!(proposal_parent, Some(Some(b2.hash())));
    }

    #[test]
    fn cap_exhausted_first_votes_count_but_fragments_do_not() {
        // A corrupt replica burns its three-notarization-vote budget on
        // decoy blocks, then first-votes block W: the first vote is
        // recorded but its inner fragment was dropped at admission. W can
        // reach manyVotes with too few pooled fragments; reconstruction
        // fails and the replica falls back to the timeout vote.
        let net = Net::new(4, 1, 0);
        let mut replica = net.replica(4, 1000);
        replica.start(0);

        // First-vote the leader's real block so guard 7 is armed without
        // the timeout block being notarized yet.
        let (real, real_frags) = net.block(1, b"the real proposal", None);
        let proposal = Message::Proposal(BlockProposal {
            block: real,
            fragment: real_frags[3].clone(),
        });
        let actions = net.deliver(&mut replica, 1, 1, &proposal);
        net.loopback(&mut replica, 1, actions);

        // Three decoy notarization votes from corrupt replica 1.
        for (i, payload) in [b"x", b"y", b"z"].iter().enumerate() {
            let (decoy, decoy_frags) = net.block(1, *payload, None);
            let msg = Message::Vote(Vote::Notar(make_notar_vote(
                &net.registry.secret_key(1),
                &net.params,
                1,
                decoy,
                Some(decoy_frags[0].clone()),
            )));
            let actions = net.deliver(&mut replica, 2 + i as Time, 1, &msg);
            net.loopback(&mut replica, 2 + i as Time, actions);
        }

        // First votes for W from corrupt 1 (fragment will be dropped: W is
        // its fourth distinct block) and honest 2.
        let (w, w_frags) = net.block(1, b"the attacked block", None);
        let mut collected = Vec::new();
        for signer in [1u16, 2] {
            let msg = net.first_vote_msg(signer, w, &w_frags);
            let actions = net.deliver(&mut replica, 6, signer, &msg);
            collected.extend(net.loopback(&mut replica, 6, actions));
        }

        assert_eq!(replica.pool().notar_vote_count(1, &w.hash()), 1);
        assert!(replica.flagged().contains(&1));
        let votes = broadcast_votes(&collected);
        assert_eq!(votes.len(), 1, "exactly the fallback vote");
        match votes[0] {
            Vote::Notar(nv) => assert!(nv.block.is_timeout()),
            other => panic!("expected timeout fallback, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let net = Net::new(4, 1, 0);
        let (block, frags) = net.block(1, b"payload", None);
        let events: Vec<(Time, InboundEvent)> = vec![
            (
                5,
                InboundEvent::Message {
                    from: 1,
                    bytes: wire::encode_message(&net.first_vote_msg(1, block, &frags)),
                },
            ),
            (6, InboundEvent::Timer),
            (
                7,
                InboundEvent::Message {
                    from: 3,
                    bytes: wire::encode_message(&net.first_vote_msg(3, block, &frags)),
                },
            ),
            (40, InboundEvent::Timer),
        ];
        let run = || {
            let mut replica = net.replica(2, 30);
            let mut log = format!("{:?}", replica.start(0));
            for (at, event) in &events {
                log.push_str(&format!("{:?}", replica.handle_event(*at, event.clone())));
            }
            log
        };
        assert_eq!(run(), run());
    }
}
