//! The complete block tree and finalization bookkeeping.
//!
//! A non-timeout block enters the tree once all four admission conditions
//! hold: a notarization certificate is pooled, the parent is present (or the
//! block extends genesis), enough certified fragments are pooled to decode a
//! payload, and the payload satisfies the validity predicate over its chain.
//! Blocks whose conditions are not yet satisfiable stay candidates and are
//! retried as certificates, votes, and ancestors arrive; a failed decode or
//! predicate is terminal.
//!
//! A block is explicitly finalized once it is in the tree and a fast
//! finalization or finalization certificate for it is pooled; its ancestors
//! finalize implicitly. The ordered log of finalized payloads is what the
//! protocol outputs.

use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::codec;
use crate::hash::Digest;
use crate::pool::Pool;
use crate::types::{Block, Slot, Time};

/// Payload validity predicate: receives the payloads of the chain from
/// genesis to the parent, then the candidate payload. The default accepts
/// everything that decodes.
pub type ValidityPredicate = dyn Fn(&[&[u8]], &[u8]) -> bool;

/// Outcome of one admission attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddOutcome {
    Added,
    AlreadyPresent,
    Pending(PendingReason),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PendingReason {
    /// No notarization certificate for the block yet.
    MissingCertificate,
    /// Parent not in the tree yet.
    MissingParent(Digest),
    /// Fewer than `f+p+1` certified fragments pooled so far.
    MissingFragments { have: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Reconstruction hit the failure marker: the tag was malicious. Every
    /// fragment subset agrees, so this is terminal.
    DecodeFailure,
    /// Payload decoded but the validity predicate refused it.
    InvalidPayload,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeFault {
    #[error("slot {slot}: finalized {previous} but asked to finalize {candidate}")]
    ConflictingFinalization {
        slot: Slot,
        previous: Digest,
        candidate: Digest,
    },
    #[error("slot {0}: more than {1} blocks reached the tree")]
    SlotOverflow(Slot, usize),
}

struct TreeNode {
    block: Block,
    payload: Vec<u8>,
}

/// Genesis-rooted tree of reconstructed, notarized, payload-valid blocks.
pub struct BlockTree {
    nodes: BTreeMap<Digest, TreeNode>,
    by_slot: BTreeMap<Slot, BTreeSet<Digest>>,
    children: BTreeMap<Digest, BTreeSet<Digest>>,
    /// Certified blocks waiting on a missing condition.
    candidates: BTreeMap<Digest, Block>,
    /// Terminal rejections (bad decode or predicate).
    rejected: BTreeSet<Digest>,
}

impl Default for BlockTree {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockTree {
    pub fn new() -> BlockTree {
        BlockTree {
            nodes: BTreeMap::new(),
            by_slot: BTreeMap::new(),
            children: BTreeMap::new(),
            candidates: BTreeMap::new(),
            rejected: BTreeSet::new(),
        }
    }

    pub fn contains(&self, hash: &Digest) -> bool {
        self.nodes.contains_key(hash)
    }

    pub fn block(&self, hash: &Digest) -> Option<&Block> {
        self.nodes.get(hash).map(|n| &n.block)
    }

    pub fn payload(&self, hash: &Digest) -> Option<&[u8]> {
        self.nodes.get(hash).map(|n| n.payload.as_slice())
    }

    pub fn blocks_at(&self, slot: Slot) -> Vec<&Block> {
        self.by_slot
            .get(&slot)
            .map_or(vec![], |set| set.iter().map(|h| &self.nodes[h].block).collect())
    }

    /// The block to chain the next proposal to after exiting `slot` by
    /// block. More than one block per slot is only reachable under
    /// misbehavior; the lowest hash wins so every honest replica that sees
    /// the same set picks the same tip.
    pub fn tip_after_exit(&self, slot: Slot) -> Option<&Block> {
        let set = self.by_slot.get(&slot)?;
        set.iter().next().map(|hash| &self.nodes[hash].block)
    }

    /// All nodes as (hash, block) pairs. Audit export.
    pub fn export(&self) -> Vec<(Digest, Block)> {
        self.nodes.iter().map(|(h, n)| (*h, n.block)).collect()
    }

    /// Registers a certified block as an admission candidate.
    pub fn note_certified(&mut self, block: Block) {
        debug_assert!(!block.is_timeout());
        let hash = block.hash();
        if !self.nodes.contains_key(&hash) && !self.rejected.contains(&hash) {
            self.candidates.insert(hash, block);
        }
    }

    /// Payloads of the chain from genesis down to (and including) `hash`.
    /// `None` for an unknown hash.
    pub fn path_payloads(&self, hash: &Digest) -> Option<Vec<&[u8]>> {
        let mut chain = Vec::new();
        let mut cursor = Some(*hash);
        while let Some(h) = cursor {
            let node = self.nodes.get(&h)?;
            chain.push(node.payload.as_slice());
            cursor = node.block.parent;
        }
        chain.reverse();
        Some(chain)
    }

    /// Attempts one admission. All four conditions are re-checked from the
    /// pool, so the caller may invoke this at any time.
    pub fn try_add(
        &mut self,
        block: &Block,
        pool: &Pool,
        validity: &ValidityPredicate,
    ) -> Result<AddOutcome, TreeFault> {
        assert!(!block.is_timeout(), "timeout blocks never enter the tree");
        let hash = block.hash();
        if self.nodes.contains_key(&hash) {
            return Ok(AddOutcome::AlreadyPresent);
        }
        if self.rejected.contains(&hash) {
            return Ok(AddOutcome::Rejected(RejectReason::DecodeFailure));
        }
        let slot = block.slot;

        if pool.notar_cert(slot, &hash).is_none() {
            return Ok(AddOutcome::Pending(PendingReason::MissingCertificate));
        }

        let parent_payloads: Vec<&[u8]> = match block.parent {
            None => vec![],
            Some(parent_hash) => match self.path_payloads(&parent_hash) {
                Some(path) => path,
                None => {
                    return Ok(AddOutcome::Pending(PendingReason::MissingParent(
                        parent_hash,
                    )))
                }
            },
        };

        let params = pool.params().codec_params();
        let need = params.d as usize;
        let mut fragments = pool.fragments_for(slot, &hash);
        if fragments.len() < need {
            return Ok(AddOutcome::Pending(PendingReason::MissingFragments {
                have: fragments.len(),
                need,
            }));
        }
        fragments.truncate(need);
        let tag = block.tag.expect("non-timeout block has a tag");
        let payload = match codec::decode(params, &tag, &fragments) {
            Ok(Some(payload)) => payload,
            Ok(None) => {
                self.candidates.remove(&hash);
                self.rejected.insert(hash);
                return Ok(AddOutcome::Rejected(RejectReason::DecodeFailure));
            }
            Err(_) => {
                // Fragments in the pool were validated on admission; a
                // contract error here means pool corruption.
                unreachable!("pooled fragments always satisfy the decode contract");
            }
        };
        if !validity(&parent_payloads, &payload) {
            self.candidates.remove(&hash);
            self.rejected.insert(hash);
            return Ok(AddOutcome::Rejected(RejectReason::InvalidPayload));
        }

        self.candidates.remove(&hash);
        self.nodes.insert(hash, TreeNode {
            block: *block,
            payload,
        });
        self.by_slot.entry(slot).or_default().insert(hash);
        if let Some(parent_hash) = block.parent {
            self.children.entry(parent_hash).or_default().insert(hash);
        }
        let at_slot = self.by_slot[&slot].len();
        if at_slot > crate::pool::MAX_NOTAR_CERTS_PER_SLOT {
            return Err(TreeFault::SlotOverflow(slot, at_slot));
        }
        Ok(AddOutcome::Added)
    }

    /// Retries every unresolved candidate until a fixpoint: an admission can
    /// unblock children waiting on their parent. Returns the newly added
    /// blocks in admission order.
    pub fn try_settle(
        &mut self,
        pool: &Pool,
        validity: &ValidityPredicate,
    ) -> Result<Vec<Block>, TreeFault> {
        let mut added = Vec::new();
        loop {
            let round: Vec<Block> = self.candidates.values().copied().collect();
            let mut progressed = false;
            for block in round {
                if let AddOutcome::Added = self.try_add(&block, pool, validity)? {
                    added.push(block);
                    progressed = true;
                }
            }
            if !progressed {
                return Ok(added);
            }
        }
    }
}

/// How a log entry got finalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalKind {
    /// Fast finalization certificate (threshold `n-p`).
    Fast,
    /// Finalization certificate (threshold `n-f-p`).
    Slow,
    /// Ancestor of an explicitly finalized block.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub slot: Slot,
    pub block: Digest,
    pub payload_len: u64,
    pub kind: FinalKind,
    pub at: Time,
}

/// Finalization bookkeeping: at most one block per slot, ancestors precede
/// descendants in the log.
#[derive(Default)]
pub struct FinalizationState {
    finalized: BTreeMap<Slot, Digest>,
    log: Vec<LogEntry>,
    /// Certificates seen before their block reached the tree, keyed by
    /// block hash.
    deferred: BTreeMap<Digest, (Slot, FinalKind)>,
}

impl FinalizationState {
    pub fn new() -> FinalizationState {
        FinalizationState::default()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn finalized_hash(&self, slot: Slot) -> Option<&Digest> {
        self.finalized.get(&slot)
    }

    /// Explicitly finalizes `block_hash` at `slot`, implicitly finalizing
    /// all of its uncommitted ancestors. Returns the newly appended log
    /// suffix, ancestor-first; empty when everything was already finalized.
    ///
    /// Defers (recorded, empty suffix) when the block is not in the tree
    /// yet; call [`FinalizationState::settle_deferred`] after tree growth.
    ///
    /// A conflicting finalization in any touched slot is a consistency
    /// fault. It cannot fire for honest replicas.
    pub fn mark_finalized(
        &mut self,
        tree: &BlockTree,
        slot: Slot,
        block_hash: Digest,
        kind: FinalKind,
        now: Time,
    ) -> Result<Vec<LogEntry>, TreeFault> {
        if !tree.contains(&block_hash) {
            self.deferred.insert(block_hash, (slot, kind));
            return Ok(vec![]);
        }
        if let Some(existing) = self.finalized.get(&slot) {
            if *existing == block_hash {
                return Ok(vec![]);
            }
            return Err(TreeFault::ConflictingFinalization {
                slot,
                previous: *existing,
                candidate: block_hash,
            });
        }

        // Collect the uncommitted chain back from the target.
        let mut chain: Vec<(Slot, Digest)> = Vec::new();
        let mut cursor = Some(block_hash);
        while let Some(hash) = cursor {
            let block = tree.block(&hash).expect("ancestors of a tree block are in the tree");
            match self.finalized.get(&block.slot) {
                Some(existing) if *existing == hash => break,
                Some(existing) => {
                    return Err(TreeFault::ConflictingFinalization {
                        slot: block.slot,
                        previous: *existing,
                        candidate: hash,
                    })
                }
                None => chain.push((block.slot, hash)),
            }
            cursor = block.parent;
        }

        chain.reverse();
        let mut suffix = Vec::with_capacity(chain.len());
        for (entry_slot, hash) in chain {
            let entry_kind = if entry_slot == slot { kind } else { FinalKind::Implicit };
            let payload_len = tree.payload(&hash).map_or(0, |p| p.len() as u64);
            let entry = LogEntry {
                slot: entry_slot,
                block: hash,
                payload_len,
                kind: entry_kind,
                at: now,
            };
            self.finalized.insert(entry_slot, hash);
            self.log.push(entry.clone());
            suffix.push(entry);
        }
        Ok(suffix)
    }

    /// Retries deferred finalizations whose blocks have since been added.
    pub fn settle_deferred(
        &mut self,
        tree: &BlockTree,
        now: Time,
    ) -> Result<Vec<LogEntry>, TreeFault> {
        let ready: Vec<(Digest, (Slot, FinalKind))> = self
            .deferred
            .iter()
            .filter(|(hash, _)| tree.contains(hash))
            .map(|(h, v)| (*h, *v))
            .collect();
        let mut suffix = Vec::new();
        for (hash, (slot, kind)) in ready {
            self.deferred.remove(&hash);
            suffix.extend(self.mark_finalized(tree, slot, hash, kind, now)?);
        }
        Ok(suffix)
    }
}
