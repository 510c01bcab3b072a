//! Threaded server: a bounded request queue, one dispatcher forming batches
//! and a fixed pool of workers, each with its own arena.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender, TrySendError};
use serde::Serialize;

use crate::batcher::{BatchFormer, BatcherConfig, Pending};
use crate::engine::{CounterSnapshot, Engine, ItemScore, RankRequest, RankResponse};
use crate::error::{Result, ServeError};
use crate::stats::{LatencyStats, Stage, StageSummary};

pub type Outcome = Result<RankResponse>;

pub struct Job {
    pub request: RankRequest,
    arrival: Instant,
    reply: Sender<Outcome>,
}

impl AsRef<RankRequest> for Pending<Job> {
    fn as_ref(&self) -> &RankRequest {
        &self.payload.request
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StatsReport {
    pub stages: Vec<(Stage, StageSummary)>,
    pub counters: CounterSnapshot,
    pub rejected: u64,
    pub store_users: usize,
    pub store_generation: u64,
}

pub struct Server {
    engine: Arc<Engine>,
    stats: Arc<LatencyStats>,
    cfg: BatcherConfig,
    tx: Option<Sender<Job>>,
    threads: Vec<JoinHandle<()>>,
    rejected: AtomicU64,
    cancelled: Arc<AtomicBool>,
}

impl Server {
    pub fn start(engine: Arc<Engine>, cfg: BatcherConfig) -> Result<Self> {
        cfg.validate()?;
        let stats = Arc::new(LatencyStats::default());
        let (tx, rx) = crossbeam_channel::bounded::<Job>(cfg.queue_capacity);
        let (btx, brx) = crossbeam_channel::bounded::<Vec<Pending<Job>>>(cfg.workers);
        let cancelled = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::with_capacity(cfg.workers + 1);
        let spawn = |name: String, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new()
                .name(name)
                .spawn(f)
                .map_err(|e| ServeError::Core(e.into()))
        };
        threads.push(spawn("seqrank-dispatch".into(), Box::new(move || dispatch(rx, btx, cfg)))?);
        for i in 0..cfg.workers {
            let (engine, stats, brx, cancelled) = (engine.clone(), stats.clone(), brx.clone(), cancelled.clone());
            threads.push(spawn(
                format!("seqrank-worker-{i}"),
                Box::new(move || work(&engine, brx, cfg.max_batch, &stats, &cancelled)),
            )?);
        }
        Ok(Server {
            engine,
            stats,
            cfg,
            tx: Some(tx),
            threads,
            rejected: AtomicU64::new(0),
            cancelled,
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn latency(&self) -> &Arc<LatencyStats> {
        &self.stats
    }

    pub fn config(&self) -> &BatcherConfig {
        &self.cfg
    }

    /// Enqueues without blocking; the outcome is sent on `reply`.
    pub fn submit(&self, request: RankRequest, reply: Sender<Outcome>) -> Result<()> {
        if request.candidates.is_empty() {
            return Err(ServeError::BadRequest("request has no candidates".into()));
        }
        let tx = self.tx.as_ref().ok_or(ServeError::Shutdown)?;
        let job = Job {
            request,
            arrival: Instant::now(),
            reply,
        };
        match tx.try_send(job) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                Err(ServeError::QueueFull)
            }
            Err(TrySendError::Disconnected(_)) => Err(ServeError::Shutdown),
        }
    }

    /// Blocking rank.
    pub fn rank(&self, request: RankRequest) -> Outcome {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.submit(request, tx)?;
        rx.recv().map_err(|_| ServeError::Shutdown)?
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn report(&self) -> StatsReport {
        StatsReport {
            stages: Stage::ALL.iter().map(|&s| (s, self.stats.summary(s))).collect(),
            counters: self.engine.counters(),
            rejected: self.rejected(),
            store_users: self.engine.store().len(),
            store_generation: self.engine.store().generation(),
        }
    }

    /// Stops accepting requests, finishes everything queued and joins the threads.
    pub fn shutdown(&mut self) {
        self.tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Server {
    /// Like [`Server::shutdown`], but queued requests are answered with
    /// [`ServeError::Shutdown`] instead of being processed.
    pub fn abort(&mut self) {
        self.cancelled.store(true, Ordering::Release);
        self.shutdown();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn dispatch(rx: Receiver<Job>, out: Sender<Vec<Pending<Job>>>, cfg: BatcherConfig) {
    let origin = Instant::now();
    let mut former = BatchFormer::new(&cfg);
    let mut open = true;
    while open || !former.is_empty() {
        let now = origin.elapsed();
        let job = if !open {
            None
        } else {
            match former.deadline() {
                Some(d) if d <= now => None,
                Some(d) => match rx.recv_timeout(d - now) {
                    Ok(j) => Some(j),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => {
                        open = false;
                        None
                    }
                },
                None => match rx.recv() {
                    Ok(j) => Some(j),
                    Err(_) => {
                        open = false;
                        None
                    }
                },
            }
        };
        if let Some(j) = job {
            let at = j.arrival.saturating_duration_since(origin);
            let n = j.request.candidates.len();
            former.push(j, n, at);
            // Take everything already waiting before deciding on a batch.
            while let Ok(j) = rx.try_recv() {
                let at = j.arrival.saturating_duration_since(origin);
                let n = j.request.candidates.len();
                former.push(j, n, at);
            }
        }
        let now = origin.elapsed();
        while !former.is_empty() && (former.ready(now) || !open) {
            let mut batch = Vec::new();
            former.take_batch(&mut batch);
            if let Err(e) = out.send(batch) {
                for p in e.0 {
                    let _ = p.payload.reply.send(Err(ServeError::Shutdown));
                }
            }
        }
    }
}

fn work(engine: &Engine, rx: Receiver<Vec<Pending<Job>>>, max_batch: usize, stats: &LatencyStats, cancelled: &AtomicBool) {
    let mut worker = engine.new_worker(max_batch);
    let mut scores: Vec<ItemScore> = Vec::with_capacity(max_batch);
    for batch in rx {
        if cancelled.load(Ordering::Acquire) {
            for p in batch {
                let _ = p.payload.reply.send(Err(ServeError::Shutdown));
            }
            continue;
        }
        let start = Instant::now();
        for p in &batch {
            stats.record(Stage::Queue, start.saturating_duration_since(p.payload.arrival));
        }
        match engine.process_batch(&mut worker, &batch, &mut scores) {
            Ok(t) => {
                let mut at = 0;
                for (p, &cold_start) in batch.iter().zip(worker.cold_flags()) {
                    let n = p.payload.request.candidates.len();
                    let resp = RankResponse {
                        user_id: p.payload.request.user_id,
                        cold_start,
                        scores: scores[at..at + n].to_vec(),
                    };
                    at += n;
                    stats.record(Stage::Prep, t.prep);
                    stats.record(Stage::Staging, t.staging);
                    stats.record(Stage::Forward, t.forward);
                    let _ = p.payload.reply.send(Ok(resp));
                    stats.record(Stage::E2e, p.payload.arrival.elapsed());
                }
            }
            Err(e) => {
                log::warn!("batch failed: {e}");
                let msg = e.to_string();
                for p in &batch {
                    let _ = p.payload.reply.send(Err(ServeError::BadRequest(msg.clone())));
                }
            }
        }
    }
}

/// Waits up to `timeout` for `n` outcomes on `rx`.
pub fn collect(rx: &Receiver<Outcome>, n: usize, timeout: Duration) -> Vec<Outcome> {
    let deadline = Instant::now() + timeout;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match rx.recv_deadline(deadline) {
            Ok(o) => out.push(o),
            Err(_) => break,
        }
    }
    out
}
