//! Scenario configuration: everything a run needs, in one TOML-friendly
//! structure. The scenario is embedded verbatim in the trace artifact, so a
//! saved trace is replayable from its own header.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kudzu_core::replica::Rotation;
use kudzu_core::types::{ProtocolParams, ReplicaId, Time};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub n: u16,
    pub f: u16,
    pub p: u16,
    /// Declared synchrony bound δ: honest-to-honest messages sent inside a
    /// synchrony window arrive within this many ticks.
    pub delta: u64,
    /// Slot timer before a replica first-votes the timeout block.
    /// Defaults to 3δ, comfortably above the 2δ the liveness argument needs.
    #[serde(default)]
    pub delta_timeout: Option<u64>,
    pub payload_size: usize,
    /// Simulated-time limit.
    pub horizon: Time,
    pub seed: u64,
    #[serde(default)]
    pub leader_rotation: RotationCfg,
    #[serde(default)]
    pub network: NetworkCfg,
    #[serde(default)]
    pub adversary: Vec<AdversaryCfg>,
    /// When set, violating the `n < 3(f+p+1)` bound assumption is a hard
    /// error instead of a warning.
    #[serde(default)]
    pub strict_bounds: bool,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum RotationCfg {
    #[default]
    RoundRobin,
    Seeded,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct NetworkCfg {
    /// In-window delivery latency. Defaults to constant δ.
    #[serde(default)]
    pub latency: LatencyCfg,
    /// δ-synchrony windows `[start, end]` over send times. Empty means the
    /// network is synchronous for the whole run.
    #[serde(default)]
    pub windows: Vec<[Time; 2]>,
    /// What happens to messages sent outside every window.
    #[serde(default)]
    pub out_of_window: OutOfWindowCfg,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyCfg {
    /// Every delivery takes exactly δ.
    #[default]
    Constant,
    /// Uniform in `[min, max]`; `max` must stay at or below δ so windows
    /// keep their promise.
    Uniform { min: u64, max: u64 },
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum OutOfWindowCfg {
    /// Deliveries outside windows take anywhere up to this many ticks.
    MaxDelay { max: u64 },
    /// Deliveries outside windows are withheld and released at the start of
    /// the next window (or past the horizon if none follows). Messages are
    /// delayed, never dropped.
    #[default]
    HoldUntilWindow,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdversaryCfg {
    pub replica: ReplicaId,
    pub behavior: BehaviorCfg,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BehaviorCfg {
    /// Never sends anything.
    Silent,
    /// Honest until `at`, then dead.
    Crash { at: Time },
    /// Proposes two different blocks to disjoint recipient halves when
    /// leader, and splits its first votes the same way.
    EquivocateLeader,
    /// First-votes the leader's block to half the replicas and a self-made
    /// block to the rest.
    VoteSplit,
    /// Seeded chaos: drops, replays, duplicates, garbage, and equivocating
    /// votes, interleaved with honest behavior.
    ByzantineRandom,
}

impl BehaviorCfg {
    /// Fail-stop behaviors never send a conflicting message; only actively
    /// Byzantine ones count against the `f` budget. More than `p` fail-stop
    /// replicas just push finalization onto the slow path.
    pub fn is_byzantine(&self) -> bool {
        !matches!(self, BehaviorCfg::Silent | BehaviorCfg::Crash { .. })
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let scenario: Scenario = toml::from_str(text).context("parsing scenario")?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn params(&self) -> ProtocolParams {
        ProtocolParams {
            n: self.n,
            f: self.f,
            p: self.p,
            instance: self.seed,
        }
    }

    pub fn rotation(&self) -> Rotation {
        match self.leader_rotation {
            RotationCfg::RoundRobin => Rotation::RoundRobin,
            RotationCfg::Seeded => Rotation::Seeded(self.seed),
        }
    }

    pub fn delta_timeout(&self) -> u64 {
        self.delta_timeout.unwrap_or(3 * self.delta)
    }

    pub fn corrupt_set(&self) -> Vec<ReplicaId> {
        let mut ids: Vec<ReplicaId> = self.adversary.iter().map(|a| a.replica).collect();
        ids.sort_unstable();
        ids
    }

    /// Replicas that can send protocol-valid but conflicting messages.
    pub fn byzantine_count(&self) -> usize {
        self.adversary
            .iter()
            .filter(|a| a.behavior.is_byzantine())
            .count()
    }

    /// Checks the replica-count requirement and scenario consistency.
    /// Returns warnings for conditions that are legal but weaken the
    /// concrete bounds.
    pub fn validate(&self) -> Result<Vec<String>> {
        let params = self.params();
        params
            .validate()
            .map_err(|e| anyhow::anyhow!("scenario {}: {e}", self.name))?;
        let mut warnings = Vec::new();
        if !params.within_bound_assumption() {
            let message = format!(
                "scenario {}: n={} >= 3(f+p+1)={}; per-slot vote/certificate bounds widen",
                self.name,
                self.n,
                3 * (self.f + self.p + 1)
            );
            if self.strict_bounds {
                bail!("{message}");
            }
            warnings.push(message);
        }
        if self.delta == 0 {
            bail!("scenario {}: delta must be at least 1 tick", self.name);
        }
        if self.delta_timeout() < 2 * self.delta {
            warnings.push(format!(
                "scenario {}: delta_timeout {} below 2*delta; honest leaders may time out",
                self.name,
                self.delta_timeout()
            ));
        }
        let corrupt = self.corrupt_set();
        let byzantine = self.byzantine_count();
        if byzantine > self.f as usize {
            bail!(
                "scenario {}: {byzantine} Byzantine replicas exceed f={}",
                self.name,
                self.f
            );
        }
        if corrupt.windows(2).any(|w| w[0] == w[1]) {
            bail!("scenario {}: duplicate corrupt replica id", self.name);
        }
        let alive_honest = self.n as usize - corrupt.len();
        if alive_honest + byzantine < params.quorum() as usize {
            warnings.push(format!(
                "scenario {}: only {alive_honest} live honest replicas; the {} quorum is out of reach and slots can only time out",
                self.name,
                params.quorum()
            ));
        }
        for cfg in &self.adversary {
            if cfg.replica < 1 || cfg.replica > self.n {
                bail!(
                    "scenario {}: corrupt replica {} out of range",
                    self.name,
                    cfg.replica
                );
            }
        }
        if let LatencyCfg::Uniform { min, max } = self.network.latency {
            if min > max {
                bail!("scenario {}: latency min > max", self.name);
            }
            if max > self.delta {
                bail!(
                    "scenario {}: in-window latency max {} exceeds delta {}",
                    self.name,
                    max,
                    self.delta
                );
            }
            if min == 0 {
                bail!("scenario {}: latency min must be at least 1", self.name);
            }
        }
        if self
            .network
            .windows
            .iter()
            .any(|[start, end]| start > end)
        {
            bail!("scenario {}: malformed synchrony window", self.name);
        }
        Ok(warnings)
    }
}
