//! Open-loop load benchmark over the four ablation configurations.
//!
//! The request stream (users, candidates, arrival schedule) is a pure
//! function of the seed; each configuration gets a fresh server over the
//! same store and replays the same stream at the target item rate. Arrivals
//! follow the schedule regardless of completions, so an overloaded server
//! shows up as queueing and rejections, and the run is flagged saturated.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use seqrank_core::model::RankingModel;
use seqrank_core::nnsearch::CandidateItem;
use seqrank_core::seqcore::{ActionToken, ActionType, Embedding, QuantizedEmbedding, SequenceCaps, UserSequences, EMBED_DIM};

use crate::batcher::BatcherConfig;
use crate::engine::{Ablation, CounterSnapshot, Engine, EngineConfig, RankRequest};
use crate::error::{Result, ServeError};
use crate::server::{collect, Server};
use crate::stats::{Stage, StageSummary};
use crate::store::FeatureStore;

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub ablations: Vec<Ablation>,
    /// Offered load in candidate items per second.
    pub rate: f64,
    pub duration: Duration,
    pub seed: u64,
    pub users: usize,
    /// Candidates per request, inclusive range.
    pub candidates: (usize, usize),
    pub lifelong_len: usize,
    pub realtime_len: usize,
    pub impression_len: usize,
    pub batcher: BatcherConfig,
    pub arena_capacity: usize,
    /// How long to wait for in-flight requests after the last arrival.
    pub drain_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ablations: Ablation::ALL.to_vec(),
            rate: 2000.0,
            duration: Duration::from_secs(30),
            seed: 1,
            users: 256,
            candidates: (16, 64),
            lifelong_len: 1024,
            realtime_len: 64,
            impression_len: 64,
            batcher: BatcherConfig::default(),
            arena_capacity: crate::arena::DEFAULT_CAPACITY,
            drain_timeout: Duration::from_secs(5),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ServeError::BadRequest(m.into()));
        if self.ablations.is_empty() {
            return bad("no ablation configs selected");
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad("rate must be > 0");
        }
        if self.duration.is_zero() {
            return bad("duration must be > 0");
        }
        if self.users == 0 {
            return bad("users must be > 0");
        }
        if self.candidates.0 == 0 || self.candidates.0 > self.candidates.1 {
            return bad("candidate range must satisfy 1 <= min <= max");
        }
        self.batcher.validate()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfigReport {
    pub ablation: Ablation,
    pub stages: Vec<(Stage, StageSummary)>,
    pub counters: CounterSnapshot,
    pub offered_requests: usize,
    pub offered_items: usize,
    pub completed_requests: usize,
    pub completed_items: usize,
    pub rejected: usize,
    pub failed: usize,
    pub achieved_items_per_sec: f64,
    /// Largest delay of an arrival behind its schedule, ms.
    pub max_arrival_lag_ms: f64,
    pub saturated: bool,
}

impl ConfigReport {
    pub fn stage(&self, stage: Stage) -> StageSummary {
        self.stages.iter().find(|(s, _)| *s == stage).map(|x| x.1).unwrap_or_default()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: Vec<ConfigReport>,
}

impl BenchReport {
    pub fn run(&self, ablation: Ablation) -> Option<&ConfigReport> {
        self.runs.iter().find(|r| r.ablation == ablation)
    }

    /// Line-oriented text: one line per (config, stage), one counter line
    /// per config, then p99 deltas of `all` against `baseline`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "bench rate={} items/s duration={:.1}s seed={} users={} candidates={}..={} ll={} rt={} imp={} max_batch={} max_wait_ms={:.1} workers={}",
            c.rate,
            c.duration.as_secs_f64(),
            c.seed,
            c.users,
            c.candidates.0,
            c.candidates.1,
            c.lifelong_len,
            c.realtime_len,
            c.impression_len,
            c.batcher.max_batch,
            c.batcher.max_wait.as_secs_f64() * 1e3,
            c.batcher.workers
        );
        for r in &self.runs {
            for (stage, s) in &r.stages {
                let _ = writeln!(
                    out,
                    "config={} stage={} n={} p50_ms={:.3} p90_ms={:.3} p99_ms={:.3}",
                    r.ablation,
                    stage.name(),
                    s.count,
                    s.p50_ms,
                    s.p90_ms,
                    s.p99_ms
                );
            }
            let k = &r.counters;
            let allocs = k.hot_path_allocs.map_or("n/a".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "config={} requests={}/{} items={}/{} rejected={} failed={} achieved_items_per_s={:.1} max_arrival_lag_ms={:.1} saturated={} \
                 staged_bytes={} broadcast_bytes={} dedup_ratio={:.5} batches={} measured_batches={} hot_path_allocs={} arena_overflows={}",
                r.ablation,
                r.completed_requests,
                r.offered_requests,
                r.completed_items,
                r.offered_items,
                r.rejected,
                r.failed,
                r.achieved_items_per_sec,
                r.max_arrival_lag_ms,
                r.saturated,
                k.staged_bytes,
                k.broadcast_bytes,
                k.dedup_ratio(),
                k.batches,
                k.measured_batches,
                allocs,
                k.arena_overflows
            );
        }
        if let (Some(b), Some(a)) = (self.run(Ablation::Baseline), self.run(Ablation::All)) {
            for stage in Stage::ALL {
                let (pb, pa) = (b.stage(stage).p99_ms, a.stage(stage).p99_ms);
                let _ = writeln!(
                    out,
                    "delta all_vs_baseline stage={} p99_baseline_ms={pb:.3} p99_all_ms={pa:.3} change={:+.2}%",
                    stage.name(),
                    100.0 * (pa - pb) / pb
                );
            }
        }
        out
    }

    /// One JSON object per configuration.
    pub fn records(&self) -> String {
        self.runs
            .iter()
            .filter_map(|r| serde_json::to_string(r).ok())
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }
}

fn random_codes(rng: &mut impl Rng) -> QuantizedEmbedding {
    QuantizedEmbedding::new(std::array::from_fn(|_| rng.random_range(-127..=127i8))).expect("codes in range")
}

fn random_list(rng: &mut impl Rng, n: usize, newest: u32, impression: bool) -> Vec<ActionToken> {
    let mut ts = newest;
    (0..n)
        .map(|_| {
            ts = ts.saturating_sub(rng.random_range(0..600)).max(1);
            let action = if impression {
                ActionType::impression()
            } else {
                ActionType::new(1 << rng.random_range(0..4)).expect("single engagement bit")
            };
            ActionToken::new(ts, action, rng.random_range(0..8), random_codes(rng)).expect("valid token")
        })
        .collect()
}

/// Store of `cfg.users` users with fixed-length random sequences.
pub fn synthetic_store(cfg: &BenchConfig) -> Result<FeatureStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5709e);
    let caps = SequenceCaps {
        lifelong: cfg.lifelong_len.max(SequenceCaps::default().lifelong),
        realtime: cfg.realtime_len.max(SequenceCaps::default().realtime),
        impression: cfg.impression_len.max(SequenceCaps::default().impression),
    };
    let store = FeatureStore::new(caps);
    for user in 0..cfg.users as u64 {
        let now = 1_700_000_000;
        let seqs = UserSequences {
            lifelong: random_list(&mut rng, cfg.lifelong_len, now - 86_400, false),
            realtime: random_list(&mut rng, cfg.realtime_len, now, false),
            impression: random_list(&mut rng, cfg.impression_len, now, true),
        };
        store.put(user, seqs)?;
    }
    Ok(store)
}

fn random_embedding(rng: &mut impl Rng) -> Embedding {
    let v: [f32; EMBED_DIM] = std::array::from_fn(|_| rng.random_range(-0.5..0.5f32));
    Embedding::from_f32(&v).expect("finite")
}

/// `(arrival offset, request)` pairs covering `cfg.duration` at `cfg.rate` items/s.
pub fn request_stream(cfg: &BenchConfig) -> Vec<(Duration, RankRequest)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut items = 0usize;
    loop {
        let at = Duration::from_secs_f64(items as f64 / cfg.rate);
        if at >= cfg.duration {
            break;
        }
        let n = rng.random_range(cfg.candidates.0..=cfg.candidates.1);
        let request_id = out.len() as u64;
        let req = RankRequest {
            request_id,
            user_id: rng.random_range(0..cfg.users as u64),
            request_ts: 1_700_000_000 + at.as_secs() as u32,
            candidates: (0..n)
                .map(|j| CandidateItem {
                    item_id: request_id * 1000 + j as u64,
                    embedding: random_embedding(&mut rng),
                })
                .collect(),
        };
        items += n;
        out.push((at, req));
    }
    out
}

fn run_one(model: &Arc<RankingModel>, store: &Arc<FeatureStore>, cfg: &BenchConfig, ablation: Ablation, stream: &[(Duration, RankRequest)]) -> Result<ConfigReport> {
    let engine = Engine::new(
        model.clone(),
        store.clone(),
        EngineConfig {
            ablation,
            arena_capacity: cfg.arena_capacity,
            ..Default::default()
        },
    )?;
    let mut server = Server::start(Arc::new(engine), cfg.batcher)?;
    let (tx, rx) = crossbeam_channel::unbounded();
    let start = Instant::now();
    let (mut submitted, mut rejected, mut max_lag) = (0usize, 0usize, Duration::ZERO);
    for (at, req) in stream {
        let due = start + *at;
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        } else {
            max_lag = max_lag.max(now - due);
        }
        match server.submit(req.clone(), tx.clone()) {
            Ok(()) => submitted += 1,
            Err(ServeError::QueueFull) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    let outcomes = collect(&rx, submitted, cfg.drain_timeout);
    let elapsed = start.elapsed();
    server.abort();

    let mut completed_items = 0;
    let mut failed = 0;
    let mut completed_requests = 0;
    for o in &outcomes {
        match o {
            Ok(r) => {
                completed_requests += 1;
                completed_items += r.scores.len();
            }
            Err(_) => failed += 1,
        }
    }
    let offered_items = stream.iter().map(|(_, r)| r.candidates.len()).sum();
    let report = server.report();
    let saturated = rejected > 0 || failed > 0 || completed_requests < stream.len() || max_lag > Duration::from_millis(100);
    Ok(ConfigReport {
        ablation,
        stages: report.stages,
        counters: report.counters,
        offered_requests: stream.len(),
        offered_items,
        completed_requests,
        completed_items,
        rejected,
        failed,
        achieved_items_per_sec: completed_items as f64 / elapsed.as_secs_f64(),
        max_arrival_lag_ms: max_lag.as_secs_f64() * 1e3,
        saturated,
    })
}

pub fn run_bench(model: Arc<RankingModel>, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let store = Arc::new(synthetic_store(cfg)?);
    let stream = request_stream(cfg);
    let mut runs = Vec::with_capacity(cfg.ablations.len());
    for &a in &cfg.ablations {
        log::info!("bench: running {a}");
        runs.push(run_one(&model, &store, cfg, a, &stream)?);
    }
    Ok(BenchReport { config: cfg.clone(), runs })
}
