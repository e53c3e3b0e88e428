//! Per-episode metrics rows and the windowed-success convergence criterion.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// One episode. Field order matches the metrics CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub stage: u32,
    /// 1-based within (run, seed, stage).
    pub episode: u64,
    pub steps: u32,
    pub total_reward: f64,
    pub success: u8,
    pub inner_loss: f64,
    pub adapt_loss: f64,
    pub wallclock_ms: u64,
}

pub const CSV_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "stage",
    "episode",
    "steps",
    "total_reward",
    "success",
    "inner_loss",
    "adapt_loss",
    "wallclock_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub threshold: f64,
    pub window: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self { threshold: 0.9, window: 200 }
    }
}

fn window_met(successes: usize, window: usize, threshold: f64) -> bool {
    successes as f64 / window as f64 >= threshold
}

/// Episode number of the first record closing a full window whose mean success is at
/// least `threshold`.
pub fn convergence_episode(series: &[MetricsRecord], threshold: f64, window: usize) -> Option<u64> {
    let window = window.max(1);
    let mut tracker = ConvergenceTracker::new(Convergence { threshold, window });
    series.iter().find(|r| tracker.push(r.success == 1)).map(|r| r.episode)
}

/// Streaming form of [`convergence_episode`].
#[derive(Clone, Debug)]
pub struct ConvergenceTracker {
    criterion: Convergence,
    recent: VecDeque<bool>,
    successes: usize,
}

impl ConvergenceTracker {
    pub fn new(criterion: Convergence) -> Self {
        Self { criterion, recent: VecDeque::with_capacity(criterion.window), successes: 0 }
    }

    /// Record one episode; true once the trailing window satisfies the criterion.
    pub fn push(&mut self, success: bool) -> bool {
        self.recent.push_back(success);
        self.successes += success as usize;
        if self.recent.len() > self.criterion.window {
            if self.recent.pop_front() == Some(true) {
                self.successes -= 1;
            }
        }
        self.is_met()
    }

    pub fn is_met(&self) -> bool {
        self.recent.len() == self.criterion.window && window_met(self.successes, self.criterion.window, self.criterion.threshold)
    }

    pub fn success_rate(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.successes as f64 / self.recent.len() as f64
        }
    }
}
