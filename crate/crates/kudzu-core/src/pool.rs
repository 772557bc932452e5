//! Per-slot vote and certificate pool.
//!
//! The pool admits validated votes under per-signer caps (one first vote, one
//! timeout vote, one finalization vote, three non-timeout notarization votes
//! per slot), assembles certificates the moment a threshold is met, and
//! absorbs duplicate certificates silently. Votes beyond a cap can only come
//! from misbehavior: they are dropped and the sender is flagged. Flags are
//! advisory: surfaced to the harness, no protocol action.
//!
//! Exactly one first vote per signer is ever considered: the first to arrive
//! wins, and a later conflicting first vote flags its sender. When a first
//! vote is stored, the notarization vote inside it is stored as well.
//!
//! Per slot the certificate stores cap out at 1 timeout, 1 fast
//! finalization, 1 finalization, and 5 notarization certificates.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::CertifiedFragment;
use crate::crypto::SignShare;
use crate::hash::Digest;
use crate::types::{
    Block, CertKind, CertificateObject, FinalVote, FirstVote, NotarVote, ProtocolParams,
    ReplicaId, Slot, Vote,
};

/// Most non-timeout notarization votes any single replica can honestly cast
/// in one slot: its first vote plus two second looks.
pub const MAX_NOTAR_VOTES_PER_SIGNER: usize = 3;
/// Most distinct blocks that can gather a notarization certificate in one
/// slot under `n < 3(f+p+1)`.
pub const MAX_NOTAR_CERTS_PER_SLOT: usize = 5;

/// What an admission did: whether the input was stored, which certificates
/// became assemblable because of it, and who got flagged.
#[derive(Debug, Default, Clone)]
pub struct PoolEffect {
    pub stored: bool,
    pub new_certificates: Vec<CertificateObject>,
    pub flagged: Vec<ReplicaId>,
}

impl PoolEffect {
    fn absorb(&mut self, other: PoolEffect) {
        self.stored |= other.stored;
        self.new_certificates.extend(other.new_certificates);
        self.flagged.extend(other.flagged);
    }
}

#[derive(Default)]
struct SlotPool {
    /// One first vote per signer, first arrival wins.
    first_votes: BTreeMap<ReplicaId, FirstVote>,
    /// Notarization votes keyed by block hash, then signer. Timeout votes
    /// live under the timeout block's hash like any other.
    notar_votes: BTreeMap<Digest, BTreeMap<ReplicaId, NotarVote>>,
    final_votes: BTreeMap<Digest, BTreeMap<ReplicaId, FinalVote>>,
    /// Distinct non-timeout blocks each signer has notarization votes for.
    notar_blocks_by_signer: BTreeMap<ReplicaId, BTreeSet<Digest>>,
    /// Signers whose timeout vote has been admitted.
    timeout_voters: BTreeSet<ReplicaId>,
    /// Every block seen in a vote or certificate this slot, by hash.
    blocks: BTreeMap<Digest, Block>,
    notar_certs: BTreeMap<Digest, CertificateObject>,
    timeout_cert: Option<CertificateObject>,
    fast_final_cert: Option<CertificateObject>,
    final_cert: Option<CertificateObject>,
}

/// Vote and certificate pool across all slots of one replica.
///
/// Owned by a single replica's event loop; old slots are retained so that
/// late certificates still assemble and the harness can audit everything.
pub struct Pool {
    params: ProtocolParams,
    slots: BTreeMap<Slot, SlotPool>,
    flagged: BTreeSet<ReplicaId>,
}

impl Pool {
    pub fn new(params: ProtocolParams) -> Pool {
        Pool {
            params,
            slots: BTreeMap::new(),
            flagged: BTreeSet::new(),
        }
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    /// Replicas the pool has seen misbehave (cap violations, conflicting
    /// votes). Advisory only.
    pub fn flagged(&self) -> &BTreeSet<ReplicaId> {
        &self.flagged
    }

    fn slot(&mut self, slot: Slot) -> &mut SlotPool {
        self.slots.entry(slot).or_default()
    }

    /// Admits a validated vote. The caller must have run
    /// [`crate::types::validate_vote`] first; the pool only enforces
    /// admission caps, not signatures.
    pub fn add_vote(&mut self, vote: &Vote) -> PoolEffect {
        let mut effect = match vote {
            Vote::First(fv) => self.add_first_vote(fv),
            Vote::Notar(nv) => self.add_notar_vote(nv),
            Vote::Final(fv) => self.add_final_vote(fv),
        };
        for id in &effect.flagged {
            self.flagged.insert(*id);
        }
        if effect.stored {
            effect
                .new_certificates
                .extend(self.assemble_ready(vote.slot()));
        }
        effect
    }

    fn add_first_vote(&mut self, fv: &FirstVote) -> PoolEffect {
        let slot = fv.inner.block.slot;
        let signer = fv.signer();
        let block_hash = fv.block().hash();
        let sp = self.slot(slot);
        if let Some(existing) = sp.first_votes.get(&signer) {
            if existing.block().hash() == block_hash {
                // Duplicate delivery, absorb silently.
                return PoolEffect::default();
            }
            // Second, conflicting first vote: cap is one.
            return PoolEffect {
                stored: false,
                new_certificates: vec![],
                flagged: vec![signer],
            };
        }
        sp.blocks.insert(block_hash, *fv.block());
        sp.first_votes.insert(signer, fv.clone());
        let mut effect = PoolEffect {
            stored: true,
            new_certificates: vec![],
            flagged: vec![],
        };
        // The contained notarization vote enters the pool as well.
        effect.absorb(self.add_notar_vote(&fv.inner));
        effect.stored = true;
        effect
    }

    fn add_notar_vote(&mut self, nv: &NotarVote) -> PoolEffect {
        let slot = nv.block.slot;
        let signer = nv.signer;
        let block_hash = nv.block.hash();
        let sp = self.slot(slot);
        if let Some(per_signer) = sp.notar_votes.get(&block_hash) {
            if per_signer.contains_key(&signer) {
                return PoolEffect::default();
            }
        }
        if nv.block.is_timeout() {
            // At most one timeout vote per signer; an identical re-delivery
            // was already absorbed above.
            if !sp.timeout_voters.insert(signer) {
                return PoolEffect {
                    stored: false,
                    new_certificates: vec![],
                    flagged: vec![signer],
                };
            }
        } else {
            let blocks = sp.notar_blocks_by_signer.entry(signer).or_default();
            if !blocks.contains(&block_hash) && blocks.len() >= MAX_NOTAR_VOTES_PER_SIGNER {
                return PoolEffect {
                    stored: false,
                    new_certificates: vec![],
                    flagged: vec![signer],
                };
            }
            blocks.insert(block_hash);
        }
        sp.blocks.insert(block_hash, nv.block);
        sp.notar_votes
            .entry(block_hash)
            .or_default()
            .insert(signer, nv.clone());
        PoolEffect {
            stored: true,
            new_certificates: vec![],
            flagged: vec![],
        }
    }

    fn add_final_vote(&mut self, fv: &FinalVote) -> PoolEffect {
        let slot = fv.block.slot;
        let signer = fv.signer;
        let block_hash = fv.block.hash();
        let sp = self.slot(slot);
        for (hash, per_signer) in &sp.final_votes {
            if per_signer.contains_key(&signer) {
                if *hash == block_hash {
                    return PoolEffect::default();
                }
                return PoolEffect {
                    stored: false,
                    new_certificates: vec![],
                    flagged: vec![signer],
                };
            }
        }
        sp.blocks.insert(block_hash, fv.block);
        sp.final_votes
            .entry(block_hash)
            .or_default()
            .insert(signer, fv.clone());
        PoolEffect {
            stored: true,
            new_certificates: vec![],
            flagged: vec![],
        }
    }

    /// Assembles every certificate whose threshold is now met and which is
    /// not already present, stores it, and returns it for broadcast.
    fn assemble_ready(&mut self, slot: Slot) -> Vec<CertificateObject> {
        let params = self.params;
        let quorum = params.quorum();
        let fast_quorum = params.fast_quorum();
        let sp = self.slot(slot);
        let mut out = Vec::new();

        // Notarization / timeout certificates, per block.
        let hashes: Vec<Digest> = sp.notar_votes.keys().copied().collect();
        for hash in hashes {
            let block = sp.blocks[&hash];
            let present = if block.is_timeout() {
                sp.timeout_cert.is_some()
            } else {
                sp.notar_certs.contains_key(&hash)
            };
            if present {
                continue;
            }
            if !block.is_timeout() && sp.notar_certs.len() >= MAX_NOTAR_CERTS_PER_SLOT {
                continue;
            }
            let shares: Vec<SignShare> =
                sp.notar_votes[&hash].values().map(|v| v.share).collect();
            if shares.len() >= quorum as usize {
                let cert = crate::crypto::assemble_certificate(&shares, quorum)
                    .expect("uniform verified shares above threshold");
                let co = CertificateObject {
                    kind: if block.is_timeout() {
                        CertKind::Timeout
                    } else {
                        CertKind::Notar
                    },
                    block,
                    cert,
                };
                if block.is_timeout() {
                    sp.timeout_cert = Some(co.clone());
                } else {
                    sp.notar_certs.insert(hash, co.clone());
                }
                out.push(co);
            }
        }

        // Fast finalization: first votes on one non-timeout block.
        if sp.fast_final_cert.is_none() {
            let mut counts: BTreeMap<Digest, Vec<SignShare>> = BTreeMap::new();
            for fv in sp.first_votes.values() {
                if !fv.block().is_timeout() {
                    counts
                        .entry(fv.block().hash())
                        .or_default()
                        .push(fv.first_share);
                }
            }
            for (hash, shares) in counts {
                if shares.len() >= fast_quorum as usize {
                    let cert = crate::crypto::assemble_certificate(&shares, fast_quorum)
                        .expect("uniform verified shares above threshold");
                    let co = CertificateObject {
                        kind: CertKind::FastFinal,
                        block: sp.blocks[&hash],
                        cert,
                    };
                    sp.fast_final_cert = Some(co.clone());
                    out.push(co);
                    break;
                }
            }
        }

        // Finalization certificate.
        if sp.final_cert.is_none() {
            let hashes: Vec<Digest> = sp.final_votes.keys().copied().collect();
            for hash in hashes {
                let shares: Vec<SignShare> =
                    sp.final_votes[&hash].values().map(|v| v.share).collect();
                if shares.len() >= quorum as usize {
                    let cert = crate::crypto::assemble_certificate(&shares, quorum)
                        .expect("uniform verified shares above threshold");
                    let co = CertificateObject {
                        kind: CertKind::Final,
                        block: sp.blocks[&hash],
                        cert,
                    };
                    sp.final_cert = Some(co.clone());
                    out.push(co);
                    break;
                }
            }
        }

        out
    }

    /// Admits a verified certificate received from the network. Stored and
    /// echoed for broadcast iff no equivalent certificate is present.
    pub fn add_certificate(&mut self, co: &CertificateObject) -> PoolEffect {
        let slot = co.slot();
        let sp = self.slot(slot);
        let hash = co.block.hash();
        let fresh = match co.kind {
            CertKind::Notar => {
                if sp.notar_certs.contains_key(&hash) {
                    false
                } else if sp.notar_certs.len() >= MAX_NOTAR_CERTS_PER_SLOT {
                    // A sixth distinct notarization certificate is impossible
                    // without mass equivocation; refuse to store it.
                    return PoolEffect::default();
                } else {
                    sp.notar_certs.insert(hash, co.clone());
                    true
                }
            }
            CertKind::Timeout => match &sp.timeout_cert {
                Some(_) => false,
                None => {
                    sp.timeout_cert = Some(co.clone());
                    true
                }
            },
            CertKind::FastFinal => match &sp.fast_final_cert {
                Some(_) => false,
                None => {
                    sp.fast_final_cert = Some(co.clone());
                    true
                }
            },
            CertKind::Final => match &sp.final_cert {
                Some(_) => false,
                None => {
                    sp.final_cert = Some(co.clone());
                    true
                }
            },
        };
        if fresh {
            sp.blocks.insert(hash, co.block);
            PoolEffect {
                stored: true,
                new_certificates: vec![co.clone()],
                flagged: vec![],
            }
        } else {
            PoolEffect::default()
        }
    }

    /// Total number of first votes admitted for the slot.
    pub fn all_votes(&self, slot: Slot) -> usize {
        self.slots
            .get(&slot)
            .map_or(0, |sp| sp.first_votes.len())
    }

    /// Largest first-vote count on any single non-timeout block; 0 when no
    /// such votes exist, which keeps the skip inequality well-defined before
    /// any votes arrive.
    pub fn max_votes(&self, slot: Slot) -> usize {
        let Some(sp) = self.slots.get(&slot) else {
            return 0;
        };
        let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
        for fv in sp.first_votes.values() {
            if !fv.block().is_timeout() {
                *counts.entry(fv.block().hash()).or_default() += 1;
            }
        }
        counts.values().copied().max().unwrap_or(0)
    }

    /// Non-timeout blocks holding at least `f+p+1` first votes, ordered by
    /// hash for determinism.
    pub fn many_votes(&self, slot: Slot) -> Vec<Block> {
        let Some(sp) = self.slots.get(&slot) else {
            return vec![];
        };
        let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
        for fv in sp.first_votes.values() {
            if !fv.block().is_timeout() {
                *counts.entry(fv.block().hash()).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .filter(|(_, count)| *count >= self.params.reconstruct_threshold() as usize)
            .map(|(hash, _)| sp.blocks[&hash])
            .collect()
    }

    /// All certified fragments stored for a block, one per signer, ordered
    /// by fragment index.
    pub fn fragments_for(&self, slot: Slot, block_hash: &Digest) -> Vec<CertifiedFragment> {
        let Some(sp) = self.slots.get(&slot) else {
            return vec![];
        };
        let Some(per_signer) = sp.notar_votes.get(block_hash) else {
            return vec![];
        };
        per_signer
            .values()
            .filter_map(|nv| nv.fragment.clone())
            .collect()
    }

    pub fn notar_cert(&self, slot: Slot, block_hash: &Digest) -> Option<&CertificateObject> {
        self.slots.get(&slot)?.notar_certs.get(block_hash)
    }

    /// All notarization certificates stored for the slot.
    pub fn notar_certs(&self, slot: Slot) -> Vec<&CertificateObject> {
        self.slots
            .get(&slot)
            .map_or(vec![], |sp| sp.notar_certs.values().collect())
    }

    pub fn timeout_cert(&self, slot: Slot) -> Option<&CertificateObject> {
        self.slots.get(&slot)?.timeout_cert.as_ref()
    }

    pub fn fast_final_cert(&self, slot: Slot) -> Option<&CertificateObject> {
        self.slots.get(&slot)?.fast_final_cert.as_ref()
    }

    pub fn final_cert(&self, slot: Slot) -> Option<&CertificateObject> {
        self.slots.get(&slot)?.final_cert.as_ref()
    }

    /// Distinct signers with a stored notarization vote for the block.
    pub fn notar_vote_count(&self, slot: Slot, block_hash: &Digest) -> usize {
        self.slots
            .get(&slot)
            .and_then(|sp| sp.notar_votes.get(block_hash))
            .map_or(0, |m| m.len())
    }

    /// Block object for a hash, if any vote or certificate carried it.
    pub fn block(&self, slot: Slot, block_hash: &Digest) -> Option<&Block> {
        self.slots.get(&slot)?.blocks.get(block_hash)
    }

    /// Slots with any stored content. Audit helper.
    pub fn populated_slots(&self) -> Vec<Slot> {
        self.slots.keys().copied().collect()
    }
}
