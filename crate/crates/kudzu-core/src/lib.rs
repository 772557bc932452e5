//! Kudzu BFT atomic broadcast, as a deterministic replica state machine.
//!
//! The protocol runs in numbered slots with one leader per slot. The leader
//! erasure-codes its block payload and sends each replica one certified
//! fragment; replicas broadcast first votes that carry their fragment, so a
//! notarized block is also reconstructable by everyone. A block finalizes on
//! the fast path after one round of first votes from `n - p` replicas, or on
//! the slow path through notarization plus finalization votes at threshold
//! `n - f - p`. Slots that fail time out by certificate and are skipped.
//!
//! Requires `n >= 3f + 2p + 1` replicas, of which at most `f` may be
//! Byzantine; the fast path engages when at most `p` replicas misbehave.
//!
//! Crate layout mirrors the protocol's pieces:
//! - [`codec`]: erasure coding and Merkle commitments for block dispersal;
//! - [`crypto`]: signature shares and k-of-n certificates (test scheme);
//! - [`types`]: blocks, votes, certificates, and their validation;
//! - [`wire`]: canonical byte encoding for everything that hits the network;
//! - [`pool`]: per-slot vote/certificate store with misbehavior caps and
//!   automatic certificate assembly;
//! - [`blocktree`]: the complete block tree and finalization bookkeeping;
//! - [`replica`]: the main loop, driven by events in and actions out.

pub mod blocktree;
pub mod codec;
pub mod crypto;
pub mod hash;
pub mod pool;
pub mod replica;
pub mod types;
pub mod wire;

pub use hash::Digest;
pub use types::{ReplicaId, Slot, Time};
