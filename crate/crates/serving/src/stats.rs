//! Per-stage latency over a sliding window with nearest-rank percentiles.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;

pub const WINDOW: Duration = Duration::from_secs(60);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Arrival until the request's batch starts forming.
    Queue,
    /// Store lookups and batch index construction.
    Prep,
    /// Copying sequence features into the model-input staging area.
    Staging,
    /// NN assembly and the model forward.
    Forward,
    /// Arrival until the response is ready.
    E2e,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Queue, Stage::Prep, Stage::Staging, Stage::Forward, Stage::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Queue => "queue",
            Stage::Prep => "prep",
            Stage::Staging => "staging",
            Stage::Forward => "forward",
            Stage::E2e => "e2e",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageSummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

/// Samples are `(recorded_at, value)` with `recorded_at` measured from the
/// stats' origin; a sample is in the window while `now - recorded_at <= window`.
pub struct LatencyStats {
    origin: Instant,
    window: Duration,
    stages: [Mutex<VecDeque<(Duration, Duration)>>; 5],
}

impl Default for LatencyStats {
    fn default() -> Self {
        Self::new(WINDOW)
    }
}

impl LatencyStats {
    pub fn new(window: Duration) -> Self {
        LatencyStats {
            origin: Instant::now(),
            window,
            stages: Default::default(),
        }
    }

    /// Time since the origin: the clock `record_at` and `percentile_at` use.
    pub fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    pub fn record(&self, stage: Stage, value: Duration) {
        self.record_at(stage, self.now(), value);
    }

    pub fn record_at(&self, stage: Stage, at: Duration, value: Duration) {
        let mut q = self.stages[stage as usize].lock();
        self.evict(&mut q, at);
        q.push_back((at, value));
    }

    fn evict(&self, q: &mut VecDeque<(Duration, Duration)>, now: Duration) {
        while q.front().is_some_and(|&(t, _)| now.saturating_sub(t) > self.window) {
            q.pop_front();
        }
    }

    fn window_values(&self, stage: Stage, now: Duration) -> Vec<Duration> {
        let mut q = self.stages[stage as usize].lock();
        self.evict(&mut q, now);
        // Out-of-order inserts may leave stale samples behind the front.
        let mut v: Vec<Duration> = q
            .iter()
            .filter(|&&(t, _)| now.saturating_sub(t) <= self.window && t <= now)
            .map(|&(_, d)| d)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn percentile(&self, stage: Stage, p: f64) -> Option<Duration> {
        self.percentile_at(stage, p, self.now())
    }

    /// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest sample.
    pub fn percentile_at(&self, stage: Stage, p: f64, now: Duration) -> Option<Duration> {
        nearest_rank(&self.window_values(stage, now), p)
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.window_values(stage, self.now()).len()
    }

    pub fn summary(&self, stage: Stage) -> StageSummary {
        self.summary_at(stage, self.now())
    }

    pub fn summary_at(&self, stage: Stage, now: Duration) -> StageSummary {
        let v = self.window_values(stage, now);
        let ms = |p| nearest_rank(&v, p).map_or(f64::NAN, |d| d.as_secs_f64() * 1e3);
        StageSummary {
            count: v.len(),
            p50_ms: ms(50.0),
            p90_ms: ms(90.0),
            p99_ms: ms(99.0),
        }
    }

    pub fn clear(&self) {
        for s in &self.stages {
            s.lock().clear();
        }
    }
}

/// `sorted` ascending; `p` in `[0, 100]`.
pub fn nearest_rank(sorted: &[Duration], p: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p.clamp(0.0, 100.0) / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}
