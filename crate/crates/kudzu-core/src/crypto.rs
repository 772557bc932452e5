//! Signature shares and k-of-n certificates.
//!
//! Two threshold levels are used: `n - f - p` for notarization and
//! finalization certificates and `n - p` for fast finalization certificates.
//! The security contract is the quorum size property: a k-certificate implies
//! that at least `k - f'` honest replicas issued matching shares, where `f'`
//! is the actual number of corrupt replicas.
//!
//! The scheme here is a deterministic test scheme: a share is a keyed digest
//! under the signer's secret, and a certificate is the sorted signer set plus
//! all member shares, verified share-by-share against the key registry. It
//! preserves the exact quorum semantics of a threshold signature; a BLS-style
//! aggregate can replace it behind [`SignatureScheme`] without touching any
//! caller.

use thiserror::Error;

use crate::hash::{derive_key, hash_share, Digest};
use crate::types::{ReplicaId, Slot};

/// Message kind a share commits to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignKind {
    /// Notarization votes, including timeout votes.
    Notar = 1,
    /// First votes.
    First = 2,
    /// Finalization votes.
    Final = 3,
}

impl SignKind {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(value: u8) -> Option<SignKind> {
        match value {
            1 => Some(SignKind::Notar),
            2 => Some(SignKind::First),
            3 => Some(SignKind::Final),
            _ => None,
        }
    }
}

/// What the signed message refers to: a concrete block or the slot's
/// distinguished timeout block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BodyTarget {
    Block(Digest),
    Timeout,
}

/// Canonical signing body. The protocol instance id and slot make shares
/// non-replayable across runs and slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignBody {
    pub instance: u64,
    pub slot: Slot,
    pub target: BodyTarget,
}

impl SignBody {
    pub const WIRE_LEN: usize = 8 + 8 + 1 + 32;

    pub fn canonical_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[0..8].copy_from_slice(&self.instance.to_le_bytes());
        out[8..16].copy_from_slice(&self.slot.to_le_bytes());
        match self.target {
            BodyTarget::Block(digest) => {
                out[16] = 0;
                out[17..49].copy_from_slice(digest.as_bytes());
            }
            BodyTarget::Timeout => {
                out[16] = 1;
            }
        }
        out
    }
}

/// A single replica's signature share on `(kind, body)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignShare {
    pub signer: ReplicaId,
    pub kind: SignKind,
    pub body: SignBody,
    pub share: Digest,
}

/// A k-of-n certificate: the sorted distinct signer set with their shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub kind: SignKind,
    pub body: SignBody,
    pub threshold: u16,
    pub signers: Vec<ReplicaId>,
    pub shares: Vec<Digest>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertError {
    #[error("only {have} distinct signers, need {need}")]
    Insufficient { have: usize, need: usize },
    #[error("shares target different messages")]
    MixedBody,
}

/// Per-replica signing key. Derived from the run seed; never serialized.
#[derive(Clone, Copy)]
pub struct SecretKey(pub(crate) [u8; 32]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; 32]) -> SecretKey {
        SecretKey(bytes)
    }
}

/// Public verification data for all `n` replicas.
///
/// In the test scheme verification recomputes the keyed digest, so the
/// registry holds the derived keys themselves. Honest code only ever signs
/// with its own [`SecretKey`]; adversarial harness code is handed the keys of
/// the corrupt set explicitly.
pub struct KeyRegistry {
    n: u16,
    keys: Vec<[u8; 32]>,
}

impl KeyRegistry {
    pub fn from_seed(seed: u64, n: u16) -> KeyRegistry {
        let keys = (1..=n).map(|id| derive_key(seed, id).0).collect();
        KeyRegistry { n, keys }
    }

    pub fn n(&self) -> u16 {
        self.n
    }

    pub fn secret_key(&self, id: ReplicaId) -> SecretKey {
        assert!(id >= 1 && id <= self.n, "replica id {id} out of range");
        SecretKey(self.keys[(id - 1) as usize])
    }

    fn key_bytes(&self, id: ReplicaId) -> Option<&[u8; 32]> {
        if id >= 1 && id <= self.n {
            Some(&self.keys[(id - 1) as usize])
        } else {
            None
        }
    }
}

/// Produces `signer`'s share on `(kind, body)`.
pub fn sign_share(key: &SecretKey, signer: ReplicaId, kind: SignKind, body: SignBody) -> SignShare {
    SignShare {
        signer,
        kind,
        body,
        share: hash_share(&key.0, kind.as_u8(), &body.canonical_bytes()),
    }
}

/// True iff the share verifies under the signer's registered key for exactly
/// the `(kind, body)` pair it claims.
pub fn verify_share(registry: &KeyRegistry, share: &SignShare) -> bool {
    match registry.key_bytes(share.signer) {
        Some(key) => {
            hash_share(key, share.kind.as_u8(), &share.body.canonical_bytes()) == share.share
        }
        None => false,
    }
}

/// Combines shares into a certificate at threshold `k`.
///
/// Duplicate signers are deduplicated (first share wins); fewer than `k`
/// distinct signers is `Insufficient`. All shares must target the same
/// `(kind, body)`; the caller is expected to have verified them.
pub fn assemble_certificate(shares: &[SignShare], k: u16) -> Result<Certificate, CertError> {
    let first = shares.first().ok_or(CertError::Insufficient {
        have: 0,
        need: k as usize,
    })?;
    let mut members: Vec<(ReplicaId, Digest)> = Vec::with_capacity(shares.len());
    for share in shares {
        if share.kind != first.kind || share.body != first.body {
            return Err(CertError::MixedBody);
        }
        if !members.iter().any(|(id, _)| *id == share.signer) {
            members.push((share.signer, share.share));
        }
    }
    if members.len() < k as usize {
        return Err(CertError::Insufficient {
            have: members.len(),
            need: k as usize,
        });
    }
    members.sort_by_key(|(id, _)| *id);
    Ok(Certificate {
        kind: first.kind,
        body: first.body,
        threshold: k,
        signers: members.iter().map(|(id, _)| *id).collect(),
        shares: members.iter().map(|(_, share)| *share).collect(),
    })
}

/// Full certificate verification: the certificate must be a valid
/// k-aggregate on exactly `(kind, body)` with threshold `k`.
pub fn verify_certificate(
    registry: &KeyRegistry,
    cert: &Certificate,
    kind: SignKind,
    body: &SignBody,
    k: u16,
) -> bool {
    if cert.kind != kind || cert.body != *body || cert.threshold != k {
        return false;
    }
    if cert.signers.len() != cert.shares.len() || cert.signers.len() < k as usize {
        return false;
    }
    // Strictly increasing ids: sorted, distinct, and in range.
    if !cert.signers.windows(2).all(|w| w[0] < w[1]) {
        return false;
    }
    cert.signers
        .iter()
        .zip(cert.shares.iter())
        .all(|(&signer, &share)| {
            verify_share(
                registry,
                &SignShare {
                    signer,
                    kind,
                    body: *body,
                    share,
                },
            )
        })
}

/// Trait carried by the artifact so a production threshold scheme can stand
/// in for the test scheme.
pub trait SignatureScheme {
    fn sign(&self, signer: ReplicaId, kind: SignKind, body: SignBody) -> SignShare;
    fn verify(&self, share: &SignShare) -> bool;
    fn assemble(&self, shares: &[SignShare], k: u16) -> Result<Certificate, CertError>;
    fn verify_certificate(&self, cert: &Certificate, kind: SignKind, body: &SignBody, k: u16)
        -> bool;
}
