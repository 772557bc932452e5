//! Canonical protocol objects: blocks, votes, certificates, proposals.
//!
//! Everything here is an immutable value with a canonical byte encoding (see
//! [`crate::wire`]), so hashing and signing are stable across processes.

use crate::codec::{self, CertifiedFragment, CodecParams, Tag};
use crate::crypto::{
    sign_share, verify_certificate, verify_share, BodyTarget, Certificate, KeyRegistry, SecretKey,
    SignBody, SignKind, SignShare,
};
use crate::hash::{hash_block, Digest};
use thiserror::Error;

pub type Slot = u64;
pub type ReplicaId = u16;
/// Simulated time, in integer ticks.
pub type Time = u64;

/// Static protocol parameters shared by every replica in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolParams {
    pub n: u16,
    pub f: u16,
    pub p: u16,
    /// Protocol instance id, folded into every signing body so votes cannot
    /// replay across runs.
    pub instance: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("n={n} violates n >= 3f+2p+1 for f={f}, p={p}")]
    TooFewReplicas { n: u16, f: u16, p: u16 },
    #[error("f must be at least 1")]
    NoFaultBudget,
    #[error("n={0} exceeds the 255-replica limit of the byte-level erasure code")]
    TooManyReplicas(u16),
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.f < 1 {
            return Err(ParamError::NoFaultBudget);
        }
        if self.n > 255 {
            return Err(ParamError::TooManyReplicas(self.n));
        }
        if (self.n as u32) < 3 * self.f as u32 + 2 * self.p as u32 + 1 {
            return Err(ParamError::TooFewReplicas {
                n: self.n,
                f: self.f,
                p: self.p,
            });
        }
        Ok(())
    }

    /// True iff `n < 3(f+p+1)`, the assumption behind the concrete
    /// per-slot storage and message bounds. Violating it is legal but the
    /// 3-votes / 5-blocks bounds widen; the harness warns.
    pub fn within_bound_assumption(&self) -> bool {
        (self.n as u32) < 3 * (self.f as u32 + self.p as u32 + 1)
    }

    /// Threshold for notarization, timeout, and finalization certificates.
    pub fn quorum(&self) -> u16 {
        self.n - self.f - self.p
    }

    /// Threshold for fast finalization certificates.
    pub fn fast_quorum(&self) -> u16 {
        self.n - self.p
    }

    /// Fragments needed to reconstruct a payload; also the first-vote count
    /// that makes a block eligible for a second look.
    pub fn reconstruct_threshold(&self) -> u16 {
        self.f + self.p + 1
    }

    pub fn codec_params(&self) -> CodecParams {
        CodecParams {
            n: self.n,
            d: self.reconstruct_threshold(),
        }
    }
}

/// A block for one slot: payload commitment plus parent link.
///
/// The distinguished timeout block has neither tag nor parent. A missing
/// parent hash on a non-timeout block means the parent is the notional
/// genesis block at slot 0.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Block {
    pub slot: Slot,
    pub tag: Option<Tag>,
    pub parent: Option<Digest>,
}

impl Block {
    pub fn new(slot: Slot, tag: Tag, parent: Option<Digest>) -> Block {
        Block {
            slot,
            tag: Some(tag),
            parent,
        }
    }

    /// The slot's timeout block.
    pub fn timeout(slot: Slot) -> Block {
        Block {
            slot,
            tag: None,
            parent: None,
        }
    }

    pub fn is_timeout(&self) -> bool {
        self.tag.is_none()
    }

    /// Slot numbering starts at 1, and a block without a tag must also lack
    /// a parent (it is the timeout block).
    pub fn structurally_valid(&self) -> bool {
        self.slot >= 1 && (self.tag.is_some() || self.parent.is_none())
    }

    /// Fixed field order, little-endian integers, one-byte presence markers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 1 + 40 + 1 + 32);
        out.extend_from_slice(&self.slot.to_le_bytes());
        match &self.tag {
            None => out.push(0),
            Some(tag) => {
                out.push(1);
                out.extend_from_slice(&tag.payload_len.to_le_bytes());
                out.extend_from_slice(tag.root.as_bytes());
            }
        }
        match &self.parent {
            None => out.push(0),
            Some(parent) => {
                out.push(1);
                out.extend_from_slice(parent.as_bytes());
            }
        }
        out
    }

    pub fn hash(&self) -> Digest {
        block_hash(self)
    }
}

/// Deterministic digest over the block's canonical serialization.
pub fn block_hash(block: &Block) -> Digest {
    hash_block(&block.canonical_bytes())
}

/// Signing body for votes and certificates on `block`.
pub fn body_for(instance: u64, block: &Block) -> SignBody {
    SignBody {
        instance,
        slot: block.slot,
        target: if block.is_timeout() {
            BodyTarget::Timeout
        } else {
            BodyTarget::Block(block.hash())
        },
    }
}

/// A notarization vote, carrying the signer's certified fragment so that
/// enough votes make the block reconstructable. Timeout votes carry none.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NotarVote {
    pub block: Block,
    pub signer: ReplicaId,
    pub share: SignShare,
    pub fragment: Option<CertifiedFragment>,
}

/// A replica's unique initial vote for a slot, wrapping its notarization
/// vote for the same block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FirstVote {
    pub first_share: SignShare,
    pub inner: NotarVote,
}

impl FirstVote {
    pub fn signer(&self) -> ReplicaId {
        self.inner.signer
    }

    pub fn block(&self) -> &Block {
        &self.inner.block
    }
}

/// A finalization vote. Only ever cast for non-timeout blocks.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FinalVote {
    pub block: Block,
    pub signer: ReplicaId,
    pub share: SignShare,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Vote {
    Notar(NotarVote),
    First(FirstVote),
    Final(FinalVote),
}

impl Vote {
    pub fn slot(&self) -> Slot {
        match self {
            Vote::Notar(v) => v.block.slot,
            Vote::First(v) => v.inner.block.slot,
            Vote::Final(v) => v.block.slot,
        }
    }

    pub fn signer(&self) -> ReplicaId {
        match self {
            Vote::Notar(v) => v.signer,
            Vote::First(v) => v.signer(),
            Vote::Final(v) => v.signer,
        }
    }
}

/// Certificate flavor. `Timeout` is the notarization certificate of the
/// slot's timeout block; the three block-bearing kinds never reference a
/// timeout block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CertKind {
    Notar,
    Timeout,
    FastFinal,
    Final,
}

impl CertKind {
    /// The share kind aggregated by this certificate kind.
    pub fn sign_kind(self) -> SignKind {
        match self {
            CertKind::Notar | CertKind::Timeout => SignKind::Notar,
            CertKind::FastFinal => SignKind::First,
            CertKind::Final => SignKind::Final,
        }
    }

    pub fn threshold(self, params: &ProtocolParams) -> u16 {
        match self {
            CertKind::FastFinal => params.fast_quorum(),
            _ => params.quorum(),
        }
    }
}

/// A certificate plus the block it certifies. Carrying the full block makes
/// the object self-contained: a replica that first learns of a block through
/// a certificate can verify and act on it immediately.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CertificateObject {
    pub kind: CertKind,
    pub block: Block,
    pub cert: Certificate,
}

impl CertificateObject {
    pub fn slot(&self) -> Slot {
        self.block.slot
    }
}

/// Leader-to-replica block proposal: the block plus the fragment addressed
/// to that specific recipient.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlockProposal {
    pub block: Block,
    pub fragment: CertifiedFragment,
}

/// Everything that travels between replicas.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Message {
    Proposal(BlockProposal),
    Vote(Vote),
    Certificate(CertificateObject),
}

/// Enforces every validity clause of the vote definitions: share binding,
/// signer attribution, fragment presence rules, and fragment verification
/// against the block's tag. Returns `false` rather than erroring so invalid
/// network input can simply be dropped.
pub fn validate_vote(registry: &KeyRegistry, params: &ProtocolParams, vote: &Vote) -> bool {
    match vote {
        Vote::Notar(v) => validate_notar_vote(registry, params, v),
        Vote::First(v) => {
            v.first_share.kind == SignKind::First
                && v.first_share.signer == v.inner.signer
                && v.first_share.body == body_for(params.instance, &v.inner.block)
                && verify_share(registry, &v.first_share)
                && validate_notar_vote(registry, params, &v.inner)
        }
        Vote::Final(v) => {
            v.block.structurally_valid()
                && !v.block.is_timeout()
                && v.share.kind == SignKind::Final
                && v.share.signer == v.signer
                && v.share.body == body_for(params.instance, &v.block)
                && verify_share(registry, &v.share)
        }
    }
}

fn validate_notar_vote(registry: &KeyRegistry, params: &ProtocolParams, v: &NotarVote) -> bool {
    if !v.block.structurally_valid() {
        return false;
    }
    if v.share.kind != SignKind::Notar
        || v.share.signer != v.signer
        || v.share.body != body_for(params.instance, &v.block)
        || !verify_share(registry, &v.share)
    {
        return false;
    }
    match (&v.block.tag, &v.fragment) {
        // Timeout votes carry no fragment.
        (None, None) => true,
        (None, Some(_)) => false,
        (Some(_), None) => false,
        (Some(tag), Some(fragment)) => {
            fragment.index == v.signer
                && codec::verify_fragment(params.codec_params(), tag, fragment)
        }
    }
}

/// Verifies a certificate object end to end: structural rules, kind/block
/// consistency, threshold selection, and the aggregate itself.
pub fn verify_certificate_object(
    registry: &KeyRegistry,
    params: &ProtocolParams,
    co: &CertificateObject,
) -> bool {
    if !co.block.structurally_valid() {
        return false;
    }
    let timeout_ok = match co.kind {
        CertKind::Timeout => co.block.is_timeout(),
        // A fast finalization certificate for a timeout block can never
        // exist; nor can plain notarization/finalization objects of kind
        // Notar/Final reference one.
        CertKind::Notar | CertKind::FastFinal | CertKind::Final => !co.block.is_timeout(),
    };
    if !timeout_ok {
        return false;
    }
    verify_certificate(
        registry,
        &co.cert,
        co.kind.sign_kind(),
        &body_for(params.instance, &co.block),
        co.kind.threshold(params),
    )
}

/// Signs and builds a notarization vote. `fragment` must be the signer's own
/// certified fragment for non-timeout blocks and `None` for timeout blocks.
pub fn make_notar_vote(
    key: &SecretKey,
    params: &ProtocolParams,
    signer: ReplicaId,
    block: Block,
    fragment: Option<CertifiedFragment>,
) -> NotarVote {
    let share = sign_share(key, signer, SignKind::Notar, body_for(params.instance, &block));
    NotarVote {
        block,
        signer,
        share,
        fragment,
    }
}

/// Signs and builds a first vote wrapping a notarization vote for the same
/// block.
pub fn make_first_vote(
    key: &SecretKey,
    params: &ProtocolParams,
    signer: ReplicaId,
    block: Block,
    fragment: Option<CertifiedFragment>,
) -> FirstVote {
    let first_share = sign_share(key, signer, SignKind::First, body_for(params.instance, &block));
    FirstVote {
        first_share,
        inner: make_notar_vote(key, params, signer, block, fragment),
    }
}

/// Signs and builds a finalization vote.
pub fn make_final_vote(
    key: &SecretKey,
    params: &ProtocolParams,
    signer: ReplicaId,
    block: Block,
) -> FinalVote {
    let share = sign_share(key, signer, SignKind::Final, body_for(params.instance, &block));
    FinalVote {
        block,
        signer,
        share,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;

    fn params() -> ProtocolParams {
        ProtocolParams {
            n: 4,
            f: 1,
            p: 0,
            instance: 11,
        }
    }

    fn sample_block(params: &ProtocolParams, slot: Slot, payload: &[u8]) -> (Block, Vec<CertifiedFragment>) {
        let (tag, frags) = encode(params.codec_params(), payload).unwrap();
        (Block::new(slot, tag, None), frags)
    }

    #[test]
    fn param_validation() {
        assert!(params().validate().is_ok());
        assert!(ProtocolParams { n: 3, f: 1, p: 0, instance: 0 }.validate().is_err());
        assert!(ProtocolParams { n: 4, f: 0, p: 0, instance: 0 }.validate().is_err());
        assert!(ProtocolParams { n: 5, f: 1, p: 1, instance: 0 }.validate().is_err());
        let p6 = ProtocolParams { n: 6, f: 1, p: 1, instance: 0 };
        assert!(p6.validate().is_ok());
        assert_eq!(p6.quorum(), 4);
        assert_eq!(p6.fast_quorum(), 5);
        assert_eq!(p6.reconstruct_threshold(), 3);
        assert!(p6.within_bound_assumption());
    }

    #[test]
    fn block_hash_is_stable_and_binds_every_field() {
        let p = params();
        let (block, _) = sample_block(&p, 1, b"payload");
        assert_eq!(block.hash(), block.hash());

        // Timeout blocks for different slots hash differently.
        assert_ne!(Block::timeout(3).hash(), Block::timeout(4).hash());

        // Mutating any field changes the hash.
        let mut slot_mut = block;
        slot_mut.slot = 2;
        assert_ne!(slot_mut.hash(), block.hash());

        let mut parent_mut = block;
        parent_mut.parent = Some(Digest([1u8; 32]));
        assert_ne!(parent_mut.hash(), block.hash());

        let mut tag_mut = block;
        tag_mut.tag.as_mut().unwrap().payload_len += 1;
        assert_ne!(tag_mut.hash(), block.hash());

        let mut root_mut = block;
        root_mut.tag.as_mut().unwrap().root = Digest([9u8; 32]);
        assert_ne!(root_mut.hash(), block.hash());
    }

    #[test]
    fn honest_votes_validate() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let (block, frags) = sample_block(&p, 1, b"data");
        for signer in 1..=p.n {
            let frag = frags[(signer - 1) as usize].clone();
            let fv = make_first_vote(&registry.secret_key(signer), &p, signer, block, Some(frag));
            assert!(validate_vote(&registry, &p, &Vote::First(fv)));
        }
        let timeout = Block::timeout(1);
        let tv = make_notar_vote(&registry.secret_key(2), &p, 2, timeout, None);
        assert!(validate_vote(&registry, &p, &Vote::Notar(tv)));
        let fin = make_final_vote(&registry.secret_key(2), &p, 2, block);
        assert!(validate_vote(&registry, &p, &Vote::Final(fin)));
    }

    #[test]
    fn timeout_vote_with_fragment_rejected() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let (_, frags) = sample_block(&p, 1, b"data");
        let timeout = Block::timeout(1);
        let mut vote = make_notar_vote(&registry.secret_key(1), &p, 1, timeout, None);
        vote.fragment = Some(frags[0].clone());
        assert!(!validate_vote(&registry, &p, &Vote::Notar(vote)));
    }

    #[test]
    fn cross_wired_first_vote_rejected() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let (block_a, frags_a) = sample_block(&p, 1, b"payload a");
        let (block_b, frags_b) = sample_block(&p, 1, b"payload b");

        let honest_a =
            make_first_vote(&registry.secret_key(1), &p, 1, block_a, Some(frags_a[0].clone()));
        let honest_b =
            make_first_vote(&registry.secret_key(1), &p, 1, block_b, Some(frags_b[0].clone()));

        // First-vote share for A wrapped around the notarization vote for B.
        let crossed = FirstVote {
            first_share: honest_a.first_share,
            inner: honest_b.inner.clone(),
        };
        assert!(!validate_vote(&registry, &p, &Vote::First(crossed)));
    }

    #[test]
    fn single_field_mutations_rejected() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let (block, frags) = sample_block(&p, 1, b"data");
        let vote = make_notar_vote(&registry.secret_key(2), &p, 2, block, Some(frags[1].clone()));
        assert!(validate_vote(&registry, &p, &Vote::Notar(vote.clone())));

        let mut wrong_signer = vote.clone();
        wrong_signer.signer = 3;
        assert!(!validate_vote(&registry, &p, &Vote::Notar(wrong_signer)));

        let mut wrong_share = vote.clone();
        wrong_share.share.share = Digest([0xAB; 32]);
        assert!(!validate_vote(&registry, &p, &Vote::Notar(wrong_share)));

        let mut wrong_fragment_index = vote.clone();
        wrong_fragment_index.fragment = Some(frags[2].clone());
        assert!(!validate_vote(&registry, &p, &Vote::Notar(wrong_fragment_index)));

        let mut wrong_slot = vote.clone();
        wrong_slot.block.slot = 2;
        assert!(!validate_vote(&registry, &p, &Vote::Notar(wrong_slot)));

        let mut dropped_fragment = vote;
        dropped_fragment.fragment = None;
        assert!(!validate_vote(&registry, &p, &Vote::Notar(dropped_fragment)));
    }

    #[test]
    fn final_vote_on_timeout_rejected() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let vote = make_final_vote(&registry.secret_key(1), &p, 1, Block::timeout(1));
        assert!(!validate_vote(&registry, &p, &Vote::Final(vote)));
    }

    #[test]
    fn certificate_object_verification() {
        let p = params();
        let registry = KeyRegistry::from_seed(3, p.n);
        let (block, _) = sample_block(&p, 1, b"data");
        let body = body_for(p.instance, &block);
        let shares: Vec<_> = (1..=3)
            .map(|id| sign_share(&registry.secret_key(id), id, SignKind::Notar, body))
            .collect();
        let cert = crate::crypto::assemble_certificate(&shares, p.quorum()).unwrap();
        let co = CertificateObject {
            kind: CertKind::Notar,
            block,
            cert,
        };
        assert!(verify_certificate_object(&registry, &p, &co));

        // A notarization certificate cannot masquerade as fast finalization:
        // wrong sign kind and wrong threshold.
        let mut fast = co.clone();
        fast.kind = CertKind::FastFinal;
        assert!(!verify_certificate_object(&registry, &p, &fast));

        // Kind/block consistency.
        let mut on_timeout = co.clone();
        on_timeout.block = Block::timeout(1);
        assert!(!verify_certificate_object(&registry, &p, &on_timeout));
    }
}
