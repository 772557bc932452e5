//! Delivery timing: latency sampling, synchrony windows, and out-of-window
//! behavior.
//!
//! Within a declared window, every delivery takes at most δ, so the window's
//! synchrony promise holds by construction (and the auditor re-checks it
//! post-hoc). Outside every window, messages are delayed, arbitrarily up to
//! a bound or held to the next window, but never dropped; certificates are
//! rebroadcast, so eventual delivery is all the protocol needs.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::scenario::{LatencyCfg, NetworkCfg, OutOfWindowCfg};
use kudzu_core::types::Time;

pub struct NetworkModel {
    latency: LatencyCfg,
    delta: u64,
    windows: Vec<[Time; 2]>,
    out_of_window: OutOfWindowCfg,
}

impl NetworkModel {
    pub fn new(cfg: &NetworkCfg, delta: u64) -> NetworkModel {
        NetworkModel {
            latency: cfg.latency,
            delta,
            windows: cfg.windows.clone(),
            out_of_window: cfg.out_of_window,
        }
    }

    pub fn delta(&self) -> u64 {
        self.delta
    }

    /// True when a message sent at `at` falls under a synchrony promise.
    pub fn in_window(&self, at: Time) -> bool {
        self.windows.is_empty() || self.windows.iter().any(|[a, b]| *a <= at && at <= *b)
    }

    fn sample_latency(&self, rng: &mut ChaCha20Rng) -> u64 {
        match self.latency {
            LatencyCfg::Constant => self.delta,
            LatencyCfg::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }

    /// Delay for a message sent at `at`. Sampling order is the simulator's
    /// event order, so runs are reproducible.
    pub fn delivery_delay(&self, rng: &mut ChaCha20Rng, at: Time) -> u64 {
        if self.in_window(at) {
            return self.sample_latency(rng);
        }
        match self.out_of_window {
            OutOfWindowCfg::MaxDelay { max } => {
                let floor = match self.latency {
                    LatencyCfg::Constant => self.delta,
                    LatencyCfg::Uniform { min, .. } => min,
                };
                rng.gen_range(floor..=max.max(floor))
            }
            OutOfWindowCfg::HoldUntilWindow => {
                let release = self
                    .windows
                    .iter()
                    .map(|[a, _]| *a)
                    .filter(|start| *start > at)
                    .min();
                match release {
                    Some(start) => (start - at) + self.sample_latency(rng),
                    // No window follows: held past any finite horizon.
                    None => Time::MAX / 4,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_latency_is_delta_everywhere_without_windows() {
        let model = NetworkModel::new(&NetworkCfg::default(), 10);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for at in [0u64, 5, 999] {
            assert!(model.in_window(at));
            assert_eq!(model.delivery_delay(&mut rng, at), 10);
        }
    }

    #[test]
    fn out_of_window_holds_until_next_window() {
        let cfg = NetworkCfg {
            latency: LatencyCfg::Constant,
            windows: vec![[0, 100], [500, 600]],
            out_of_window: OutOfWindowCfg::HoldUntilWindow,
        };
        let model = NetworkModel::new(&cfg, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // Sent at 200: held until 500, then one latency.
        assert_eq!(model.delivery_delay(&mut rng, 200), 300 + 10);
        // Inside the second window: normal.
        assert_eq!(model.delivery_delay(&mut rng, 550), 10);
        // After every window: effectively forever.
        assert!(model.delivery_delay(&mut rng, 700) > 1 << 40);
    }

    #[test]
    fn out_of_window_max_delay_bounds_the_sample() {
        let cfg = NetworkCfg {
            latency: LatencyCfg::Uniform { min: 2, max: 9 },
            windows: vec![[0, 50]],
            out_of_window: OutOfWindowCfg::MaxDelay { max: 200 },
        };
        let model = NetworkModel::new(&cfg, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let within = model.delivery_delay(&mut rng, 25);
            assert!((2..=9).contains(&within));
            let outside = model.delivery_delay(&mut rng, 75);
            assert!((2..=200).contains(&outside));
        }
    }
}
