//! Discrete-event simulation and audit harness for the Kudzu atomic
//! broadcast protocol.
//!
//! A [`scenario::Scenario`] (TOML) fixes everything about a run: replica
//! counts, timing, network behavior, adversary scripts, and the seed. A run
//! produces a [`trace::RunTrace`] that embeds the scenario, so saved traces
//! replay bit-for-bit. [`audit::audit`] applies the global invariant
//! checks (safety, quorum backing, boundedness, synchrony, liveness) and
//! reports per-slot finalization latency.

pub mod adversary;
pub mod audit;
pub mod network;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use audit::{audit, AuditReport};
pub use scenario::Scenario;
pub use sim::{run_scenario, Sim};
pub use trace::RunTrace;
