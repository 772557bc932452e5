//! Global invariant auditors applied to a finished run trace.
//!
//! Safety is judged from all replicas' finalized logs and trees, never
//! sampled: finalization uniqueness per slot, finalized-block ancestry over
//! every later tree block, and the incompatibility of a finalized slot with
//! conflicting notarization or timeout certificates. The quorum auditor
//! confirms that every accepted certificate is backed by enough honest
//! shares actually emitted. The bounds auditor enforces the per-slot vote
//! and certificate caps. The synchrony auditor re-checks every in-window
//! delivery against δ after the fact.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use kudzu_core::types::{ReplicaId, Slot, Time};

use crate::network::NetworkModel;

use crate::trace::{MsgKind, RunTrace, TraceEvent, TIMEOUT_TARGET};

const MAX_REPORTED_VIOLATIONS: usize = 8;

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub checked: u64,
    pub violations: Vec<String>,
}

impl Verdict {
    fn new() -> Verdict {
        Verdict {
            pass: true,
            checked: 0,
            violations: Vec::new(),
        }
    }

    fn violation(&mut self, message: String) {
        self.pass = false;
        if self.violations.len() < MAX_REPORTED_VIOLATIONS {
            self.violations.push(message);
        }
    }
}

/// Explicit finalization latency for one slot: when the leader dispatched
/// the proposal and when each honest replica explicitly finalized.
#[derive(Clone, Debug, Serialize)]
pub struct SlotLatency {
    pub slot: Slot,
    pub proposal_at: Time,
    /// `(replica, finalized_at, kind)`, explicit finalizations only.
    pub finalized: Vec<(ReplicaId, Time, String)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub scenario: String,
    pub seed: u64,
    pub safety: Verdict,
    pub quorum: Verdict,
    pub bounds: Verdict,
    pub synchrony: Verdict,
    pub liveness: Verdict,
    pub completeness: Verdict,
    pub latency: Vec<SlotLatency>,
    /// Fitted per-slot message constant: max over slots of messages / n^2.
    pub message_constant: f64,
    pub bytes_sent: BTreeMap<ReplicaId, u64>,
    /// Union of all honest replicas' misbehavior flags.
    pub flags: BTreeSet<ReplicaId>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.safety.pass
            && self.quorum.pass
            && self.bounds.pass
            && self.synchrony.pass
            && self.liveness.pass
            && self.completeness.pass
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |buf: &mut String, name: &str, verdict: &Verdict| {
            buf.push_str(&format!(
                "  {name:<10} {} ({} checks)\n",
                if verdict.pass { "PASS" } else { "FAIL" },
                verdict.checked
            ));
            for violation in &verdict.violations {
                buf.push_str(&format!("    ! {violation}\n"));
            }
        };
        out.push_str(&format!(
            "scenario {} (seed {}): {}\n",
            self.scenario,
            self.seed,
            if self.pass() { "PASS" } else { "FAIL" }
        ));
        line(&mut out, "safety", &self.safety);
        line(&mut out, "quorum", &self.quorum);
        line(&mut out, "bounds", &self.bounds);
        line(&mut out, "synchrony", &self.synchrony);
        line(&mut out, "liveness", &self.liveness);
        line(&mut out, "complete", &self.completeness);
        out.push_str(&format!(
            "  messages/slot fit: c = {:.2} (messages <= c*n^2)\n",
            self.message_constant
        ));
        if !self.latency.is_empty() {
            let fast = self
                .latency
                .iter()
                .flat_map(|l| l.finalized.iter())
                .filter(|(_, _, kind)| kind == "fast")
                .count();
            let slow = self
                .latency
                .iter()
                .flat_map(|l| l.finalized.iter())
                .filter(|(_, _, kind)| kind == "slow")
                .count();
            out.push_str(&format!(
                "  explicit finalizations: {fast} fast, {slow} slow over {} proposed slots\n",
                self.latency.len()
            ));
        }
        if !self.flags.is_empty() {
            out.push_str(&format!("  flagged replicas: {:?}\n", self.flags));
        }
        out
    }
}

/// Runs every auditor over the trace.
pub fn audit(trace: &RunTrace) -> AuditReport {
    let scenario = &trace.scenario;
    let n2 = (scenario.n as f64).powi(2);
    let message_constant = trace
        .stats
        .messages_by_slot
        .values()
        .map(|count| *count as f64 / n2)
        .fold(0.0f64, f64::max);
    AuditReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        safety: audit_safety(trace),
        quorum: audit_quorum(trace),
        bounds: audit_bounds(trace),
        synchrony: audit_synchrony(trace),
        liveness: audit_liveness(trace),
        completeness: audit_completeness(trace),
        latency: slot_latencies(trace),
        message_constant,
        bytes_sent: trace.stats.bytes_sent.clone(),
        flags: trace
            .replicas
            .values()
            .flat_map(|snapshot| snapshot.flagged.iter().copied())
            .collect(),
    }
}

/// Explicit finalizations `(slot -> block)` observed across honest logs.
fn explicit_finalizations(trace: &RunTrace) -> BTreeMap<Slot, BTreeSet<String>> {
    let mut out: BTreeMap<Slot, BTreeSet<String>> = BTreeMap::new();
    for snapshot in trace.replicas.values() {
        for record in &snapshot.finalized {
            if record.kind != "implicit" {
                out.entry(record.slot)
                    .or_default()
                    .insert(record.block.clone());
            }
        }
    }
    out
}

pub fn audit_safety(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();

    // (i) No two honest replicas finalize different blocks in one slot,
    // explicit or implicit.
    let mut by_slot: BTreeMap<Slot, BTreeMap<ReplicaId, String>> = BTreeMap::new();
    for (id, snapshot) in &trace.replicas {
        for record in &snapshot.finalized {
            by_slot
                .entry(record.slot)
                .or_default()
                .insert(*id, record.block.clone());
        }
    }
    for (slot, blocks) in &by_slot {
        verdict.checked += 1;
        let distinct: BTreeSet<&String> = blocks.values().collect();
        if distinct.len() > 1 {
            verdict.violation(format!(
                "slot {slot}: conflicting finalizations {:?}",
                blocks
            ));
        }
    }

    // (ii) Every explicitly finalized block is an ancestor of every block
    // at the same or a later slot, in every honest tree.
    let explicit = explicit_finalizations(trace);
    for (id, snapshot) in &trace.replicas {
        let nodes: BTreeMap<&String, (Slot, Option<&String>)> = snapshot
            .tree
            .iter()
            .map(|node| (&node.hash, (node.slot, node.parent.as_ref())))
            .collect();
        for (slot, finalized_blocks) in &explicit {
            for finalized in finalized_blocks {
                for node in &snapshot.tree {
                    if node.slot < *slot {
                        continue;
                    }
                    verdict.checked += 1;
                    // Walk the parent chain down to the finalized slot. The
                    // step bound keeps the walk finite on malformed traces.
                    let mut cursor = &node.hash;
                    let mut cursor_slot = node.slot;
                    let mut steps = snapshot.tree.len() + 1;
                    loop {
                        if steps == 0 {
                            verdict.violation(format!(
                                "replica {id}: parent chain of {} does not terminate",
                                &node.hash[..12]
                            ));
                            break;
                        }
                        steps -= 1;
                        if cursor_slot < *slot {
                            verdict.violation(format!(
                                "replica {id}: block {} at slot {} skips finalized slot {slot}",
                                &node.hash[..12],
                                node.slot
                            ));
                            break;
                        }
                        if cursor_slot == *slot {
                            if cursor != finalized {
                                verdict.violation(format!(
                                    "replica {id}: block {} at slot {} does not descend from finalized {}",
                                    &node.hash[..12],
                                    node.slot,
                                    &finalized[..12]
                                ));
                            }
                            break;
                        }
                        match nodes.get(cursor).and_then(|(_, parent)| *parent) {
                            Some(parent) => {
                                cursor = parent;
                                cursor_slot = nodes
                                    .get(parent)
                                    .map(|(slot, _)| *slot)
                                    .unwrap_or(0);
                            }
                            // Chain reached genesis above the finalized slot.
                            None => {
                                verdict.violation(format!(
                                    "replica {id}: block {} at slot {} reaches genesis above finalized slot {slot}",
                                    &node.hash[..12],
                                    node.slot
                                ));
                                break;
                            }
                        }
                    }
                }
            }
        }
    }

    // (iii) A finalized slot admits no conflicting notarization certificate
    // and no timeout certificate, anywhere.
    for event in &trace.events {
        let TraceEvent::CertAccepted {
            slot, kind, target, ..
        } = event
        else {
            continue;
        };
        let Some(finalized_blocks) = explicit.get(slot) else {
            continue;
        };
        verdict.checked += 1;
        match kind {
            MsgKind::NotarCert => {
                if !finalized_blocks.contains(target) {
                    verdict.violation(format!(
                        "slot {slot}: notarization certificate for {} conflicts with finalization",
                        &target[..12]
                    ));
                }
            }
            MsgKind::TimeoutCert => {
                verdict.violation(format!(
                    "slot {slot}: timeout certificate coexists with a finalization"
                ));
            }
            _ => {}
        }
    }

    verdict
}

/// Quorum size property: every accepted certificate is backed by at least
/// `k - f'` honest replicas that really emitted matching shares, and no
/// honest member appears without having emitted one.
pub fn audit_quorum(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();
    let scenario = &trace.scenario;
    let params = scenario.params();
    let corrupt: BTreeSet<ReplicaId> = scenario.corrupt_set().into_iter().collect();
    let f_prime = corrupt.len();

    // (slot, target) -> signers that emitted each share class.
    let mut notar: BTreeMap<(Slot, &String), BTreeSet<ReplicaId>> = BTreeMap::new();
    let mut first: BTreeMap<(Slot, &String), BTreeSet<ReplicaId>> = BTreeMap::new();
    let mut fin: BTreeMap<(Slot, &String), BTreeSet<ReplicaId>> = BTreeMap::new();
    for event in &trace.events {
        if let TraceEvent::VoteEmitted {
            signer,
            slot,
            kind,
            target,
            ..
        } = event
        {
            match kind {
                MsgKind::FirstVote => {
                    // A first vote carries both a First share and the inner
                    // notarization share.
                    first.entry((*slot, target)).or_default().insert(*signer);
                    notar.entry((*slot, target)).or_default().insert(*signer);
                }
                MsgKind::NotarVote => {
                    notar.entry((*slot, target)).or_default().insert(*signer);
                }
                MsgKind::FinalVote => {
                    fin.entry((*slot, target)).or_default().insert(*signer);
                }
                _ => {}
            }
        }
    }

    for event in &trace.events {
        let TraceEvent::CertAccepted {
            slot,
            kind,
            target,
            signers,
            ..
        } = event
        else {
            continue;
        };
        let (emitters, k) = match kind {
            MsgKind::NotarCert | MsgKind::TimeoutCert => (notar.get(&(*slot, target)), params.quorum()),
            MsgKind::FastFinalCert => (first.get(&(*slot, target)), params.fast_quorum()),
            MsgKind::FinalCert => (fin.get(&(*slot, target)), params.quorum()),
            _ => continue,
        };
        verdict.checked += 1;
        let empty = BTreeSet::new();
        let emitters = emitters.unwrap_or(&empty);
        let mut honest_backing = 0usize;
        for signer in signers {
            if corrupt.contains(signer) {
                continue;
            }
            if emitters.contains(signer) {
                honest_backing += 1;
            } else {
                verdict.violation(format!(
                    "slot {slot}: certificate {kind:?} names honest replica {signer} which never emitted a matching share"
                ));
            }
        }
        let required = (k as usize).saturating_sub(f_prime);
        if honest_backing < required {
            verdict.violation(format!(
                "slot {slot}: certificate {kind:?} backed by {honest_backing} honest shares, quorum size property requires {required}"
            ));
        }
    }
    verdict
}

/// Per-slot vote and certificate caps, plus the distinct-certified-block
/// bound.
pub fn audit_bounds(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();
    let scenario = &trace.scenario;
    let params = scenario.params();
    let corrupt: BTreeSet<ReplicaId> = scenario.corrupt_set().into_iter().collect();

    // Max distinct non-timeout blocks an honest replica may notarize per
    // slot: its first vote plus one per f+p+1 distinct first votes seen.
    let vote_cap = if params.within_bound_assumption() {
        3
    } else {
        1 + (params.n / params.reconstruct_threshold()) as usize
    };

    // Honest per-replica, per-slot emission counts.
    #[derive(Default)]
    struct Emissions {
        first: usize,
        timeout_notar: usize,
        fin: usize,
        non_timeout_targets: BTreeSet<String>,
    }
    let mut per_replica: BTreeMap<(ReplicaId, Slot), Emissions> = BTreeMap::new();
    for event in &trace.events {
        if let TraceEvent::VoteEmitted {
            signer,
            slot,
            kind,
            target,
            ..
        } = event
        {
            if corrupt.contains(signer) {
                continue;
            }
            let entry = per_replica.entry((*signer, *slot)).or_default();
            let is_timeout = target == TIMEOUT_TARGET;
            match kind {
                MsgKind::FirstVote => {
                    entry.first += 1;
                    if is_timeout {
                        entry.timeout_notar += 1;
                    } else {
                        entry.non_timeout_targets.insert(target.clone());
                    }
                }
                MsgKind::NotarVote => {
                    if is_timeout {
                        entry.timeout_notar += 1;
                    } else {
                        entry.non_timeout_targets.insert(target.clone());
                    }
                }
                MsgKind::FinalVote => entry.fin += 1,
                _ => {}
            }
        }
    }
    for ((signer, slot), emissions) in &per_replica {
        verdict.checked += 1;
        if emissions.first > 1 {
            verdict.violation(format!("replica {signer} slot {slot}: {} first votes", emissions.first));
        }
        if emissions.timeout_notar > 1 {
            verdict.violation(format!(
                "replica {signer} slot {slot}: {} timeout votes",
                emissions.timeout_notar
            ));
        }
        if emissions.fin > 1 {
            verdict.violation(format!(
                "replica {signer} slot {slot}: {} finalization votes",
                emissions.fin
            ));
        }
        if emissions.non_timeout_targets.len() > vote_cap {
            verdict.violation(format!(
                "replica {signer} slot {slot}: notarization votes for {} distinct blocks (cap {vote_cap})",
                emissions.non_timeout_targets.len()
            ));
        }
    }

    // Distinct notarization-certified blocks per slot, across all replicas.
    // Crashed replicas sign nothing, so only actively Byzantine ones can
    // inflate the count.
    let f_byz = scenario.byzantine_count() as u64;
    let certified_cap = (3 * (params.n as u64 - f_byz))
        .checked_div(params.quorum() as u64 - f_byz)
        .map_or(5, |bound| bound.min(5));
    let mut certified: BTreeMap<Slot, BTreeSet<&String>> = BTreeMap::new();
    let mut per_replica_certs: BTreeMap<(ReplicaId, Slot, &'static str), usize> = BTreeMap::new();
    for event in &trace.events {
        let TraceEvent::CertAccepted {
            replica,
            slot,
            kind,
            target,
            ..
        } = event
        else {
            continue;
        };
        let label = match kind {
            MsgKind::NotarCert => {
                certified.entry(*slot).or_default().insert(target);
                "notar"
            }
            MsgKind::TimeoutCert => "timeout",
            MsgKind::FastFinalCert => "fast-final",
            MsgKind::FinalCert => "final",
            _ => continue,
        };
        *per_replica_certs.entry((*replica, *slot, label)).or_default() += 1;
    }
    for (slot, blocks) in &certified {
        verdict.checked += 1;
        if blocks.len() as u64 > certified_cap {
            verdict.violation(format!(
                "slot {slot}: {} distinct notarization-certified blocks (cap {certified_cap})",
                blocks.len()
            ));
        }
    }
    for ((replica, slot, label), count) in &per_replica_certs {
        verdict.checked += 1;
        let cap = if *label == "notar" { 5 } else { 1 };
        if *count > cap {
            verdict.violation(format!(
                "replica {replica} slot {slot}: {count} {label} certificates (cap {cap})"
            ));
        }
    }

    // Per-slot message envelope. The protocol produces O(n^2) messages per
    // slot; anything past this generous constant means runaway traffic.
    let n2 = (scenario.n as u64).pow(2);
    for (slot, count) in &trace.stats.messages_by_slot {
        verdict.checked += 1;
        if *count > 24 * n2 {
            verdict.violation(format!("slot {slot}: {count} messages exceeds 24*n^2"));
        }
    }

    verdict
}

/// Every honest-to-honest delivery sent inside a synchrony window arrives
/// within δ.
pub fn audit_synchrony(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();
    let scenario = &trace.scenario;
    let corrupt: BTreeSet<ReplicaId> = scenario.corrupt_set().into_iter().collect();
    let network = NetworkModel::new(&scenario.network, scenario.delta);
    for event in &trace.events {
        let TraceEvent::Deliver {
            at,
            sent_at,
            from,
            to,
        } = event
        else {
            continue;
        };
        if corrupt.contains(from) || corrupt.contains(to) {
            continue;
        }
        if !network.in_window(*sent_at) {
            continue;
        }
        verdict.checked += 1;
        if at.saturating_sub(*sent_at) > scenario.delta {
            verdict.violation(format!(
                "{from}->{to}: sent {sent_at}, delivered {at}, exceeds delta {}",
                scenario.delta
            ));
        }
    }
    verdict
}

/// Under a fully synchronous network, every honest replica exits every slot
/// within `delta_timeout + 3 delta` of the first honest entry. Skipped for
/// scenarios with explicit asynchrony windows.
pub fn audit_liveness(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();
    let scenario = &trace.scenario;
    if !scenario.network.windows.is_empty() {
        return verdict;
    }
    let bound = scenario.delta_timeout() + 3 * scenario.delta;

    // entry[slot][replica] = time
    let mut entries: BTreeMap<Slot, BTreeMap<ReplicaId, Time>> = BTreeMap::new();
    for (id, snapshot) in &trace.replicas {
        for (slot, at) in &snapshot.slot_entries {
            entries.entry(*slot).or_default().insert(*id, *at);
        }
    }
    let honest_count = trace.replicas.len();
    for (slot, slot_entries) in &entries {
        let Some(next_entries) = entries.get(&(slot + 1)) else {
            continue;
        };
        // Only audit slots every honest replica entered and exited.
        if slot_entries.len() < honest_count || next_entries.len() < honest_count {
            continue;
        }
        verdict.checked += 1;
        let first_entry = slot_entries.values().min().copied().unwrap_or(0);
        let last_exit = next_entries.values().max().copied().unwrap_or(0);
        if last_exit > first_entry + bound {
            verdict.violation(format!(
                "slot {slot}: first honest entry {first_entry}, last exit {last_exit}, bound {bound}"
            ));
        }
    }
    verdict
}

/// Under a fully synchronous network, a block in any honest tree at time T
/// appears in every honest tree by T + δ. Skipped for scenarios with
/// explicit asynchrony windows.
pub fn audit_completeness(trace: &RunTrace) -> Verdict {
    let mut verdict = Verdict::new();
    let scenario = &trace.scenario;
    if !scenario.network.windows.is_empty() {
        return verdict;
    }
    let delta = scenario.delta;
    // Leave slack at the horizon: a block added later than this may not
    // have had time to propagate before the run stopped.
    let Some(cutoff) = scenario.horizon.checked_sub(delta + 1) else {
        return verdict;
    };
    let adds: Vec<BTreeMap<&String, Time>> = trace
        .replicas
        .values()
        .map(|snapshot| {
            snapshot
                .tree
                .iter()
                .map(|node| (&node.hash, node.added_at))
                .collect()
        })
        .collect();
    for (i, own) in adds.iter().enumerate() {
        for (hash, added_at) in own {
            if *added_at > cutoff {
                continue;
            }
            for (j, other) in adds.iter().enumerate() {
                if i == j {
                    continue;
                }
                verdict.checked += 1;
                match other.get(*hash) {
                    Some(other_at) if *other_at <= added_at + delta => {}
                    Some(other_at) => verdict.violation(format!(
                        "block {}: in one tree at {added_at}, another only at {other_at} (> +{delta})",
                        &hash[..12]
                    )),
                    None => verdict.violation(format!(
                        "block {}: in one tree at {added_at}, missing from another by the horizon",
                        &hash[..12]
                    )),
                }
            }
        }
    }
    verdict
}

/// Explicit finalization latency per proposed slot.
pub fn slot_latencies(trace: &RunTrace) -> Vec<SlotLatency> {
    let mut proposals: BTreeMap<Slot, Time> = BTreeMap::new();
    let mut finalized: BTreeMap<Slot, Vec<(ReplicaId, Time, String)>> = BTreeMap::new();
    for event in &trace.events {
        match event {
            TraceEvent::ProposalSent { at, slot, .. } => {
                proposals.entry(*slot).or_insert(*at);
            }
            TraceEvent::Finalized {
                at,
                replica,
                slot,
                kind,
                ..
            } if kind != "implicit" => {
                finalized
                    .entry(*slot)
                    .or_default()
                    .push((*replica, *at, kind.clone()));
            }
            _ => {}
        }
    }
    proposals
        .into_iter()
        .map(|(slot, proposal_at)| SlotLatency {
            slot,
            proposal_at,
            finalized: finalized.remove(&slot).unwrap_or_default(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{NetworkCfg, RotationCfg, Scenario};
    use crate::trace::{LogRecord, ReplicaSnapshot, RunStats, TreeNodeRecord};

    fn hx(byte: u8) -> String {
        hex::encode([byte; 32])
    }

    fn forged_trace() -> RunTrace {
        let scenario = Scenario {
            name: "forged".into(),
            n: 4,
            f: 1,
            p: 0,
            delta: 10,
            delta_timeout: Some(30),
            payload_size: 0,
            horizon: 100,
            seed: 0,
            leader_rotation: RotationCfg::RoundRobin,
            network: NetworkCfg::default(),
            adversary: vec![],
            strict_bounds: false,
        };
        let node = |slot: u64, hash: u8, parent: Option<u8>| TreeNodeRecord {
            slot,
            hash: hx(hash),
            parent: parent.map(hx),
            added_at: 20,
        };
        let entry = |slot: u64, hash: u8| LogRecord {
            slot,
            block: hx(hash),
            payload_len: 0,
            kind: "fast".into(),
            at: 20,
        };
        let snapshot = |hash: u8| ReplicaSnapshot {
            finalized: vec![entry(1, hash)],
            tree: vec![node(1, hash, None)],
            flagged: vec![],
            slot_entries: vec![(1, 0), (2, 20)],
        };
        RunTrace {
            scenario,
            events: vec![],
            replicas: [(1u16, snapshot(0xAA)), (2, snapshot(0xAA))].into(),
            stats: RunStats::default(),
        }
    }

    #[test]
    fn forged_conflicting_finalizations_fail_safety() {
        let mut trace = forged_trace();
        // Replica 2 finalizes a different block for slot 1.
        let snapshot = trace.replicas.get_mut(&2).unwrap();
        snapshot.finalized[0].block = hx(0xBB);
        snapshot.tree[0].hash = hx(0xBB);
        let verdict = audit_safety(&trace);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].contains("conflicting finalizations"));
    }

    #[test]
    fn forged_descendant_of_wrong_block_fails_safety() {
        let mut trace = forged_trace();
        // A slot-2 block in replica 2's tree that chains past slot 1
        // through a non-finalized block.
        let snapshot = trace.replicas.get_mut(&2).unwrap();
        snapshot.tree.push(TreeNodeRecord {
            slot: 1,
            hash: hx(0xCC),
            parent: None,
            added_at: 20,
        });
        snapshot.tree.push(TreeNodeRecord {
            slot: 2,
            hash: hx(0xDD),
            parent: Some(hx(0xCC)),
            added_at: 30,
        });
        let verdict = audit_safety(&trace);
        assert!(!verdict.pass);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.contains("does not descend")));
    }

    #[test]
    fn forged_timeout_cert_on_finalized_slot_fails_safety() {
        let mut trace = forged_trace();
        trace.events.push(TraceEvent::CertAccepted {
            at: 25,
            replica: 1,
            slot: 1,
            kind: MsgKind::TimeoutCert,
            target: TIMEOUT_TARGET.into(),
            signers: vec![1, 2, 3],
        });
        let verdict = audit_safety(&trace);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].contains("timeout certificate"));
    }

    #[test]
    fn forged_certificate_without_honest_shares_fails_quorum() {
        let mut trace = forged_trace();
        // Certificate names honest replicas 1..3 but nobody emitted votes.
        trace.events.push(TraceEvent::CertAccepted {
            at: 20,
            replica: 1,
            slot: 1,
            kind: MsgKind::NotarCert,
            target: hx(0xAA),
            signers: vec![1, 2, 3],
        });
        let verdict = audit_quorum(&trace);
        assert!(!verdict.pass);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.contains("never emitted")));
    }

    #[test]
    fn forged_overvoting_fails_bounds() {
        let mut trace = forged_trace();
        for hash in [1u8, 2, 3, 4] {
            trace.events.push(TraceEvent::VoteEmitted {
                at: 10,
                signer: 1,
                slot: 1,
                kind: MsgKind::NotarVote,
                target: hx(hash),
            });
        }
        let verdict = audit_bounds(&trace);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].contains("distinct blocks"));
    }

    #[test]
    fn forged_slow_delivery_fails_synchrony() {
        let mut trace = forged_trace();
        trace.events.push(TraceEvent::Deliver {
            at: 31,
            sent_at: 10,
            from: 1,
            to: 2,
        });
        let verdict = audit_synchrony(&trace);
        assert!(!verdict.pass);
    }

    #[test]
    fn forged_straggler_tree_fails_completeness() {
        let mut trace = forged_trace();
        // Replica 2 never saw the block replica 1 added at t=20.
        trace.replicas.get_mut(&2).unwrap().tree.clear();
        let verdict = audit_completeness(&trace);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].contains("missing"));
    }

    #[test]
    fn forged_parent_cycle_terminates_with_violation() {
        let mut trace = forged_trace();
        // Two slot-2 nodes pointing at each other: the walk must not hang.
        let snapshot = trace.replicas.get_mut(&2).unwrap();
        snapshot.tree.push(TreeNodeRecord {
            slot: 2,
            hash: hx(0xC1),
            parent: Some(hx(0xC2)),
            added_at: 30,
        });
        snapshot.tree.push(TreeNodeRecord {
            slot: 2,
            hash: hx(0xC2),
            parent: Some(hx(0xC1)),
            added_at: 30,
        });
        let verdict = audit_safety(&trace);
        assert!(!verdict.pass);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.contains("does not terminate")));
    }

    #[test]
    fn clean_forged_trace_passes() {
        let report = audit(&forged_trace());
        // No events at all: nothing to flag except completeness/liveness
        // checks over the two identical snapshots.
        assert!(report.safety.pass);
        assert!(report.quorum.pass);
        assert!(report.bounds.pass);
        assert!(report.completeness.pass);
    }
}
