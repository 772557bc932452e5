//! Erasure-coded payload dispersal with Merkle commitments.
//!
//! A payload is split into `n` fragments so that any `d` of them reconstruct
//! it, and committed to by a Merkle tree over the fragments. The commitment
//! travels as a [`Tag`] (payload length plus Merkle root); each fragment
//! travels as a [`CertifiedFragment`] carrying its validation path.
//!
//! [`decode`] re-encodes the reconstructed payload and compares the resulting
//! root against the tag. Under collision resistance of the hash this makes the
//! tag binding: every verifying `d`-subset of fragments for one tag decodes to
//! the same result, and a maliciously constructed tag decodes to `None` on
//! every subset. No erasure-code proof system is needed.
//!
//! The code is a systematic Reed-Solomon code over GF(2^8): the first `d`
//! fragments are contiguous chunks of the (zero-padded) payload and the
//! remaining `n - d` are parity. Byte `k` of every fragment forms one codeword
//! across the `n` fragments.

use reed_solomon_erasure::galois_8::ReedSolomon;
use thiserror::Error;

use crate::hash::{hash_leaf, hash_node, Digest};

/// Erasure-code geometry: `n` fragments, any `d` reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecParams {
    /// Total fragment count (one per replica).
    pub n: u16,
    /// Reconstruction threshold.
    pub d: u16,
}

impl CodecParams {
    pub fn new(n: u16, d: u16) -> Result<Self, CodecError> {
        let params = CodecParams { n, d };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        // GF(2^8) supports at most 255 non-zero evaluation points.
        if self.n == 0 || self.d == 0 || self.d > self.n || self.n > 255 {
            return Err(CodecError::InvalidParams {
                n: self.n,
                d: self.d,
            });
        }
        Ok(())
    }

    /// Fragment byte length for a payload of `payload_len` bytes.
    pub fn fragment_size(&self, payload_len: u64) -> usize {
        if payload_len == 0 {
            0
        } else {
            (payload_len as usize).div_ceil(self.d as usize)
        }
    }

    /// Leaf count of the Merkle tree (fragment count rounded up to a power
    /// of two; missing leaves are the all-zeros digest).
    pub fn padded_leaves(&self) -> usize {
        (self.n as usize).next_power_of_two()
    }

    /// Validation path length: one sibling per tree level.
    pub fn path_len(&self) -> usize {
        self.padded_leaves().trailing_zeros() as usize
    }
}

/// Commitment to an erasure-coded payload: unpadded byte length plus the
/// Merkle root over all `n` fragments.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tag {
    pub payload_len: u64,
    pub root: Digest,
}

/// One fragment plus the Merkle path authenticating it at `index`.
///
/// `index` is 1-based, matching replica numbering: fragment `i` is addressed
/// to replica `i`. The path holds the sibling digest for each tree level;
/// sides are implied by the index bits.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CertifiedFragment {
    pub index: u16,
    pub data: Vec<u8>,
    pub path: Vec<Digest>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid codec parameters (n={n}, d={d})")]
    InvalidParams { n: u16, d: u16 },
    #[error("expected exactly {expected} fragments, got {got}")]
    WrongFragmentCount { expected: usize, got: usize },
    #[error("duplicate or out-of-range fragment index {0}")]
    BadIndex(u16),
    #[error("fragment {0} does not verify against the tag")]
    UnverifiedFragment(u16),
}

/// Splits `payload` into `n` certified fragments and returns the tag
/// committing to them.
///
/// Pure function: identical inputs yield identical tags and fragments.
pub fn encode(
    params: CodecParams,
    payload: &[u8],
) -> Result<(Tag, Vec<CertifiedFragment>), CodecError> {
    params.validate()?;
    let shards = make_shards(params, payload);
    let tree = MerkleTree::build(params, &shards);
    let tag = Tag {
        payload_len: payload.len() as u64,
        root: tree.root(),
    };
    let fragments = shards
        .into_iter()
        .enumerate()
        .map(|(pos, data)| CertifiedFragment {
            index: pos as u16 + 1,
            data,
            path: tree.path(pos),
        })
        .collect();
    Ok((tag, fragments))
}

/// Checks that `frag` is a certified fragment for `tag`: correct length for
/// the tag's payload size, in-range position, and a validation path that
/// recomputes to the tag's root. Returns `false` on any malformation.
pub fn verify_fragment(params: CodecParams, tag: &Tag, frag: &CertifiedFragment) -> bool {
    if params.validate().is_err() {
        return false;
    }
    if frag.index == 0 || frag.index > params.n {
        return false;
    }
    if frag.data.len() != params.fragment_size(tag.payload_len) {
        return false;
    }
    if frag.path.len() != params.path_len() {
        return false;
    }
    let mut node = hash_leaf(frag.index, &frag.data);
    let mut pos = (frag.index - 1) as usize;
    for sibling in &frag.path {
        node = if pos & 1 == 0 {
            hash_node(&node, sibling)
        } else {
            hash_node(sibling, &node)
        };
        pos >>= 1;
    }
    node == tag.root
}

/// Reconstructs the payload from exactly `d` verified fragments.
///
/// Returns `Ok(None)`, the failure marker, when the reconstructed payload
/// does not re-encode to the tag's root, which happens exactly when the tag
/// was not produced by [`encode`]. Any two verifying `d`-subsets for the same
/// tag yield the same result.
///
/// Callers must pre-verify: unverified fragments or colliding indices are
/// contract violations reported as errors, not as the failure marker.
pub fn decode(
    params: CodecParams,
    tag: &Tag,
    frags: &[CertifiedFragment],
) -> Result<Option<Vec<u8>>, CodecError> {
    params.validate()?;
    if frags.len() != params.d as usize {
        return Err(CodecError::WrongFragmentCount {
            expected: params.d as usize,
            got: frags.len(),
        });
    }
    let mut slots: Vec<Option<Vec<u8>>> = vec![None; params.n as usize];
    for frag in frags {
        if !verify_fragment(params, tag, frag) {
            return Err(CodecError::UnverifiedFragment(frag.index));
        }
        let pos = (frag.index - 1) as usize;
        if slots[pos].is_some() {
            return Err(CodecError::BadIndex(frag.index));
        }
        slots[pos] = Some(frag.data.clone());
    }

    let payload_len = tag.payload_len as usize;
    let frag_size = params.fragment_size(tag.payload_len);
    let data_shards = params.d as usize;
    let parity_shards = (params.n - params.d) as usize;

    let mut padded = Vec::with_capacity(data_shards * frag_size);
    if frag_size > 0 {
        if parity_shards > 0 {
            let rs = ReedSolomon::new(data_shards, parity_shards)
                .expect("validated params always form a legal code");
            rs.reconstruct_data(&mut slots)
                .expect("d verified fragments always suffice to reconstruct");
        }
        for slot in slots.iter().take(data_shards) {
            padded.extend_from_slice(slot.as_ref().expect("data shard reconstructed"));
        }
    }
    padded.truncate(payload_len);
    if padded.len() < payload_len {
        // Fragments were shorter than the tag's length claims; cannot happen
        // for verified fragments, but keep decode total.
        return Ok(None);
    }

    // Binding check: the payload must re-encode to the committed root. This
    // also rejects non-canonical padding bytes smuggled into the shards.
    let (reencoded, _) = encode(params, &padded)?;
    if reencoded.root != tag.root {
        return Ok(None);
    }
    Ok(Some(padded))
}

/// Data shards (zero-padded payload chunks) followed by parity shards.
fn make_shards(params: CodecParams, payload: &[u8]) -> Vec<Vec<u8>> {
    let frag_size = params.fragment_size(payload.len() as u64);
    let data_shards = params.d as usize;
    let parity_shards = (params.n - params.d) as usize;

    let mut shards = Vec::with_capacity(params.n as usize);
    for chunk_idx in 0..data_shards {
        let start = (chunk_idx * frag_size).min(payload.len());
        let end = ((chunk_idx + 1) * frag_size).min(payload.len());
        let mut shard = payload[start..end].to_vec();
        shard.resize(frag_size, 0);
        shards.push(shard);
    }
    for _ in 0..parity_shards {
        shards.push(vec![0u8; frag_size]);
    }
    if frag_size > 0 && parity_shards > 0 {
        let rs = ReedSolomon::new(data_shards, parity_shards)
            .expect("validated params always form a legal code");
        rs.encode(&mut shards)
            .expect("equal-size shards always encode");
    }
    shards
}

/// Full binary Merkle tree over fragment leaves, padded with zero digests up
/// to a power of two.
struct MerkleTree {
    // levels[0] = leaves, last level = [root]
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    fn build(params: CodecParams, shards: &[Vec<u8>]) -> Self {
        let padded = params.padded_leaves();
        let mut leaves = Vec::with_capacity(padded);
        for (pos, shard) in shards.iter().enumerate() {
            leaves.push(hash_leaf(pos as u16 + 1, shard));
        }
        leaves.resize(padded, Digest::ZERO);

        let mut levels = vec![leaves];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let next = prev
                .chunks(2)
                .map(|pair| hash_node(&pair[0], &pair[1]))
                .collect();
            levels.push(next);
        }
        MerkleTree { levels }
    }

    fn root(&self) -> Digest {
        self.levels.last().unwrap()[0]
    }

    fn path(&self, mut pos: usize) -> Vec<Digest> {
        let mut path = Vec::with_capacity(self.levels.len() - 1);
        for level in &self.levels[..self.levels.len() - 1] {
            path.push(level[pos ^ 1]);
            pos >>= 1;
        }
        path
    }
}

/// Builds a tag whose Merkle tree mixes fragments from two different
/// payloads. Every fragment verifies against the returned tag, but no
/// `d`-subset can decode to a payload that re-encodes to its root, so
/// [`decode`] yields the failure marker on every subset.
///
/// Test-only adversarial constructor, exposed for fault-injection harnesses.
pub fn splice_tags(
    params: CodecParams,
    payload_a: &[u8],
    payload_b: &[u8],
    from_a: &[u16],
) -> Result<(Tag, Vec<CertifiedFragment>), CodecError> {
    assert_eq!(
        payload_a.len(),
        payload_b.len(),
        "spliced payloads must have equal length"
    );
    let shards_a = make_shards(params, payload_a);
    let shards_b = make_shards(params, payload_b);
    let mixed: Vec<Vec<u8>> = (0..params.n as usize)
        .map(|pos| {
            if from_a.contains(&(pos as u16 + 1)) {
                shards_a[pos].clone()
            } else {
                shards_b[pos].clone()
            }
        })
        .collect();
    let tree = MerkleTree::build(params, &mixed);
    let tag = Tag {
        payload_len: payload_a.len() as u64,
        root: tree.root(),
    };
    let fragments = mixed
        .into_iter()
        .enumerate()
        .map(|(pos, data)| CertifiedFragment {
            index: pos as u16 + 1,
            data,
            path: tree.path(pos),
        })
        .collect();
    Ok((tag, fragments))
}
