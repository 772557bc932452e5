//! The single 32-byte hash used everywhere: Merkle leaves and nodes, block
//! hashes, signing bodies, and key derivation.
//!
//! All call sites go through the domain-tagged helpers below, so swapping the
//! hash function means editing this module only. Domain tags keep the leaf,
//! node, and block spaces disjoint; without them a Merkle internal node could
//! be reinterpreted as a leaf (a classic second-preimage ambiguity).

use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;

/// A 32-byte hash value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// The reserved all-zeros digest: the notional genesis hash and the
    /// Merkle padding leaf.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest> {
        let arr: [u8; DIGEST_LEN] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

fn sha256_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for part in parts {
        h.update(part);
    }
    Digest(h.finalize().into())
}

/// Merkle leaf hash, bound to the fragment's 1-based position.
pub fn hash_leaf(index: u16, data: &[u8]) -> Digest {
    sha256_parts(&[b"kudzu:leaf", &index.to_le_bytes(), data])
}

/// Merkle internal node hash.
pub fn hash_node(left: &Digest, right: &Digest) -> Digest {
    sha256_parts(&[b"kudzu:node", &left.0, &right.0])
}

/// Block hash over the block's canonical byte encoding.
pub fn hash_block(canonical: &[u8]) -> Digest {
    sha256_parts(&[b"kudzu:block", canonical])
}

/// Keyed digest for the test signature scheme.
pub fn hash_share(secret: &[u8; 32], kind: u8, body: &[u8]) -> Digest {
    sha256_parts(&[b"kudzu:share", secret, &[kind], body])
}

/// Per-replica secret key derivation from a run seed.
pub fn derive_key(seed: u64, replica: u16) -> Digest {
    sha256_parts(&[b"kudzu:key", &seed.to_le_bytes(), &replica.to_le_bytes()])
}

/// Generic domain-tagged hash for auxiliary derivations (leader schedules,
/// payload generators).
pub fn hash_domain(domain: &str, parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    for part in parts {
        h.update(part);
    }
    Digest(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domains_are_disjoint() {
        let d = Digest([7u8; 32]);
        assert_ne!(hash_leaf(1, &d.0), hash_node(&d, &Digest::ZERO));
        assert_ne!(hash_block(&d.0), hash_leaf(1, &d.0));
    }

    #[test]
    fn leaf_binds_position() {
        assert_ne!(hash_leaf(1, b"frag"), hash_leaf(2, b"frag"));
    }

    #[test]
    fn key_derivation_is_per_replica() {
        assert_ne!(derive_key(42, 1), derive_key(42, 2));
        assert_ne!(derive_key(42, 1), derive_key(43, 1));
        assert_eq!(derive_key(42, 1), derive_key(42, 1));
    }
}
