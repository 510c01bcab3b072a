//! The inference pipeline behind `rank`, in four ablation configurations.
//!
//! A batch runs in three timed stages:
//!
//! 1. prep — store lookups (cold-start users get empty sequences) and the
//!    item → request index;
//! 2. staging — request sequence features are copied from the store into the
//!    batch's working memory. Broadcast layouts copy them once per item,
//!    de-duplicated layouts once per request;
//! 3. forward — per item: NN assembly, model-input fill and the model.
//!
//! | config       | working memory | staging   | NN search | transformer |
//! |--------------|----------------|-----------|-----------|-------------|
//! | `baseline`   | heap           | per item  | broadcast | reference   |
//! | `arena_only` | arena          | per item  | broadcast | reference   |
//! | `dedup_only` | heap           | per request | fused   | reference   |
//! | `all`        | arena          | per request | fused   | fused       |
//!
//! Every item's result depends only on its own request and candidate, so
//! scores do not change with batch composition, and all configurations agree
//! to within the transformer kernels' round-off.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use seqrank_core::encoder::{fill_input, normalized_candidate, SeqInput, CTX_DIM};
use seqrank_core::losses::HeadConfig;
use seqrank_core::model::{context_features, score, Kernel, RankingModel};
use seqrank_core::nnsearch::dedup::sequence_bytes;
use seqrank_core::nnsearch::naive::{self, NaiveScratch};
use seqrank_core::nnsearch::{fused, AssembledSequence, CandidateItem, SequenceView, Slot};
use seqrank_core::scratch::{HeapScratch, Scratch};
use seqrank_core::seqcore::{Embedding, UserSequences, EMBED_DIM, NUM_HEADS};

use crate::alloc;
use crate::arena::{Arena, ArenaStats, Frame, DEFAULT_CAPACITY};
use crate::error::{Result, ServeError};
use crate::logger::{nn_record, NnLogger};
use crate::store::FeatureStore;

/// Batches per worker excluded from hot-path allocation counts (buffers
/// reach their steady-state capacity during these).
pub const WARMUP_BATCHES: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    ArenaOnly,
    DedupOnly,
    #[default]
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::ArenaOnly, Ablation::DedupOnly, Ablation::All];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::ArenaOnly => "arena_only",
            Ablation::DedupOnly => "dedup_only",
            Ablation::All => "all",
        }
    }

    pub fn arena(self) -> bool {
        matches!(self, Ablation::ArenaOnly | Ablation::All)
    }

    pub fn dedup(self) -> bool {
        matches!(self, Ablation::DedupOnly | Ablation::All)
    }

    pub fn kernel(self) -> Kernel {
        match self {
            Ablation::All => Kernel::Fused,
            _ => Kernel::Reference,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = ServeError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ServeError::BadRequest(format!("unknown ablation '{s}' (baseline, arena_only, dedup_only, all)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRequest {
    /// Caller-chosen id; becomes the chunk id of logged records.
    pub request_id: u64,
    pub user_id: u64,
    /// Drives the context features.
    pub request_ts: u32,
    pub candidates: Vec<CandidateItem>,
}

impl AsRef<RankRequest> for RankRequest {
    fn as_ref(&self) -> &RankRequest {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ItemScore {
    pub pin_id: u64,
    /// Head probabilities in head order.
    pub probs: [f32; NUM_HEADS],
    pub final_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankResponse {
    pub user_id: u64,
    /// The user was not in the store and was scored with empty sequences.
    pub cold_start: bool,
    /// In candidate order.
    pub scores: Vec<ItemScore>,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub ablation: Ablation,
    pub arena_capacity: usize,
    pub head: HeadConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            ablation: Ablation::All,
            arena_capacity: DEFAULT_CAPACITY,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Default)]
struct Counters {
    batches: AtomicU64,
    requests: AtomicU64,
    items: AtomicU64,
    cold_starts: AtomicU64,
    staged_bytes: AtomicU64,
    broadcast_bytes: AtomicU64,
    measured_batches: AtomicU64,
    hot_path_allocs: AtomicU64,
    arena_overflows: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub batches: u64,
    pub requests: u64,
    pub items: u64,
    pub cold_starts: u64,
    /// Sequence-feature bytes copied into staging.
    pub staged_bytes: u64,
    /// What a per-item broadcast of the same batches would have staged.
    pub broadcast_bytes: u64,
    /// Batches after warmup whose allocations were counted.
    pub measured_batches: u64,
    /// Heap allocations inside the batch pipeline after warmup; `None` when
    /// the counting allocator is not installed.
    pub hot_path_allocs: Option<u64>,
    pub arena_overflows: u64,
    pub logged: u64,
    pub log_dropped: u64,
}

impl CounterSnapshot {
    pub fn dedup_ratio(&self) -> f64 {
        if self.broadcast_bytes == 0 {
            f64::NAN
        } else {
            self.staged_bytes as f64 / self.broadcast_bytes as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchTiming {
    pub prep: Duration,
    pub staging: Duration,
    pub forward: Duration,
    /// Allocations made while processing the batch, if counted.
    pub allocs: Option<u64>,
}

/// Per-worker state: the arena and index buffers reused across batches.
pub struct Worker {
    arena: Arena,
    users: Vec<Arc<UserSequences>>,
    cold: Vec<bool>,
    item_request: Vec<u32>,
    batches: u64,
}

impl Worker {
    pub fn arena_stats(&self) -> ArenaStats {
        self.arena.stats()
    }
}

/// Source of per-batch working memory with per-item sub-scopes.
trait Workspace: Scratch {
    type Item<'a>: Scratch
    where
        Self: 'a;
    fn item(&self) -> Self::Item<'_>;
}

impl Workspace for Arena {
    type Item<'a> = Frame<'a>;
    fn item(&self) -> Frame<'_> {
        self.frame()
    }
}

impl Workspace for HeapScratch {
    type Item<'a> = HeapScratch;
    fn item(&self) -> HeapScratch {
        HeapScratch::new()
    }
}

pub struct Engine {
    model: Arc<RankingModel>,
    store: Arc<FeatureStore>,
    cfg: EngineConfig,
    logger: Option<NnLogger>,
    empty: Arc<UserSequences>,
    counters: Counters,
}

impl Engine {
    pub fn new(model: Arc<RankingModel>, store: Arc<FeatureStore>, cfg: EngineConfig) -> Result<Self> {
        let dims = model.dims();
        if dims.emb != EMBED_DIM {
            return Err(ServeError::BadRequest(format!("model embedding width {} != {EMBED_DIM}", dims.emb)));
        }
        model.nn.expect_len(dims.seq_len)?;
        cfg.head.validate()?;
        Ok(Engine {
            model,
            store,
            cfg,
            logger: None,
            empty: Arc::new(UserSequences::empty()),
            counters: Counters::default(),
        })
    }

    pub fn with_logger(mut self, logger: NnLogger) -> Self {
        self.logger = Some(logger);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &RankingModel {
        &self.model
    }

    pub fn store(&self) -> &Arc<FeatureStore> {
        &self.store
    }

    pub fn new_worker(&self, max_batch: usize) -> Worker {
        Worker {
            arena: Arena::new(if self.cfg.ablation.arena() { self.cfg.arena_capacity } else { 0 }),
            users: Vec::with_capacity(max_batch),
            cold: Vec::with_capacity(max_batch),
            item_request: Vec::with_capacity(max_batch),
            batches: 0,
        }
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            batches: get(&c.batches),
            requests: get(&c.requests),
            items: get(&c.items),
            cold_starts: get(&c.cold_starts),
            staged_bytes: get(&c.staged_bytes),
            broadcast_bytes: get(&c.broadcast_bytes),
            measured_batches: get(&c.measured_batches),
            hot_path_allocs: alloc::installed().then(|| get(&c.hot_path_allocs)),
            arena_overflows: get(&c.arena_overflows),
            logged: self.logger.as_ref().map_or(0, NnLogger::written),
            log_dropped: self.logger.as_ref().map_or(0, NnLogger::dropped),
        }
    }

    /// Scores every candidate of `batch` into `out` (cleared first), in
    /// request order then candidate order.
    pub fn process_batch<R: AsRef<RankRequest>>(&self, w: &mut Worker, batch: &[R], out: &mut Vec<ItemScore>) -> Result<BatchTiming> {
        let overflows_before = w.arena.stats().overflows;
        let (timing, allocs) = alloc::count(|| self.run_batch(w, batch, out));
        let mut timing = timing?;
        timing.allocs = allocs;
        w.batches += 1;
        let c = &self.counters;
        c.arena_overflows.fetch_add(w.arena.stats().overflows - overflows_before, Ordering::Relaxed);
        if w.batches > WARMUP_BATCHES {
            c.measured_batches.fetch_add(1, Ordering::Relaxed);
            c.hot_path_allocs.fetch_add(allocs.unwrap_or(0), Ordering::Relaxed);
        }
        Ok(timing)
    }

    fn run_batch<R: AsRef<RankRequest>>(&self, w: &mut Worker, batch: &[R], out: &mut Vec<ItemScore>) -> Result<BatchTiming> {
        let t0 = Instant::now();
        out.clear();
        w.arena.reset();
        w.users.clear();
        w.cold.clear();
        w.item_request.clear();
        for (i, r) in batch.iter().enumerate() {
            let r = r.as_ref();
            if r.candidates.is_empty() {
                return Err(ServeError::BadRequest(format!("request {} has no candidates", r.request_id)));
            }
            match self.store.get(r.user_id) {
                Some(u) => {
                    w.users.push(u);
                    w.cold.push(false);
                }
                None => {
                    w.users.push(self.empty.clone());
                    w.cold.push(true);
                }
            }
            w.item_request.extend(std::iter::repeat_n(i as u32, r.candidates.len()));
        }
        let prep = t0.elapsed();

        let (staging, forward) = if self.cfg.ablation.arena() {
            self.stage_and_forward(&w.arena, &w.users, &w.item_request, batch, out)?
        } else {
            self.stage_and_forward(&HeapScratch::new(), &w.users, &w.item_request, batch, out)?
        };

        let c = &self.counters;
        c.batches.fetch_add(1, Ordering::Relaxed);
        c.requests.fetch_add(batch.len() as u64, Ordering::Relaxed);
        c.items.fetch_add(w.item_request.len() as u64, Ordering::Relaxed);
        c.cold_starts.fetch_add(w.cold.iter().filter(|&&x| x).count() as u64, Ordering::Relaxed);
        Ok(BatchTiming {
            prep,
            staging,
            forward,
            allocs: None,
        })
    }

    fn stage_and_forward<W: Workspace, R: AsRef<RankRequest>>(
        &self,
        ws: &W,
        users: &[Arc<UserSequences>],
        item_request: &[u32],
        batch: &[R],
        out: &mut Vec<ItemScore>,
    ) -> Result<(Duration, Duration)> {
        let t0 = Instant::now();
        let dedup = self.cfg.ablation.dedup();
        let copies = if dedup { users.len() } else { item_request.len() };
        let views = ws.alloc_fill(copies, SequenceView::EMPTY);
        let mut staged = 0u64;
        for (c, view) in views.iter_mut().enumerate() {
            let user = &users[if dedup { c } else { item_request[c] as usize }];
            *view = SequenceView {
                lifelong: ws.alloc_copy(&user.lifelong),
                realtime: ws.alloc_copy(&user.realtime),
                impression: ws.alloc_copy(&user.impression),
            };
            staged += sequence_bytes(user);
        }
        let broadcast: u64 = item_request.iter().map(|&r| sequence_bytes(&users[r as usize])).sum();
        self.counters.staged_bytes.fetch_add(staged, Ordering::Relaxed);
        self.counters.broadcast_bytes.fetch_add(broadcast, Ordering::Relaxed);
        let staging = t0.elapsed();

        let t1 = Instant::now();
        let mut item = 0;
        for (r, req) in batch.iter().enumerate() {
            let req = req.as_ref();
            let ctx = context_features(req.request_ts).map(|x| x as f32);
            for cand in &req.candidates {
                let view = views[if dedup { r } else { item }];
                let scratch = ws.item();
                let probs = self.score_item(&scratch, view, &cand.embedding, &ctx, |slots, segments| {
                    if let Some(log) = &self.logger {
                        let seq = AssembledSequence {
                            segments,
                            slots: slots.to_vec(),
                        };
                        log.log(nn_record(req.user_id, req.request_id, req.request_ts, cand, seq));
                    }
                })?;
                let final_score = probs.iter().zip(&self.cfg.head.utility).map(|(&p, &u)| f64::from(p) * u).sum();
                out.push(ItemScore {
                    pin_id: cand.item_id,
                    probs,
                    final_score,
                });
                item += 1;
            }
        }
        Ok((staging, t1.elapsed()))
    }

    fn score_item<S: Scratch>(
        &self,
        s: &S,
        view: SequenceView<'_>,
        cand: &Embedding,
        ctx: &[f32; CTX_DIM],
        on_assembled: impl FnOnce(&[Slot], [seqrank_core::nnsearch::Segment; 4]),
    ) -> Result<[f32; NUM_HEADS]> {
        let nn = &self.model.nn;
        let len = nn.seq_len();
        let slots = s.alloc_fill::<Slot>(len, None);
        let segments = if self.cfg.ablation.dedup() {
            let heap = s.alloc_fill(fused::heap_len(nn), (0f64, 0u32));
            fused::assemble_into(view, cand, nn, heap, slots)
        } else {
            let n = view.longest();
            let mut ns = NaiveScratch {
                normed: s.alloc_fill(n, Embedding::zeros()),
                scores: s.alloc_fill(n, 0f64),
                order: s.alloc_fill(n, 0u32),
            };
            naive::assemble_into(view, cand, nn, &mut ns, slots)
        };
        on_assembled(slots, segments);

        let tokens = s.alloc_fill(len * EMBED_DIM, 0f32);
        let actions = s.alloc_fill(len, 0u16);
        let surfaces = s.alloc_fill(len, 0u8);
        let valid = s.alloc_fill(len, false);
        fill_input(slots, tokens, actions, surfaces, valid);
        let cand_f = s.alloc_fill(EMBED_DIM, 0f32);
        normalized_candidate(cand, cand_f);
        let input = SeqInput {
            tokens,
            actions,
            surfaces,
            valid,
        };
        let mut probs = [0f32; NUM_HEADS];
        score(
            &self.model.params,
            self.model.use_sequence,
            &input,
            cand_f,
            ctx,
            self.cfg.ablation.kernel(),
            s,
            &mut probs,
        )?;
        Ok(probs)
    }

    /// Runs `requests` as one batch and splits the results per request.
    pub fn rank_batch(&self, w: &mut Worker, requests: &[RankRequest]) -> Result<Vec<RankResponse>> {
        let mut out = Vec::new();
        self.process_batch(w, requests, &mut out)?;
        Ok(split_responses(requests, &w.cold, &out))
    }
}

/// Cuts the flat item scores of a batch back into per-request responses.
pub fn split_responses(requests: &[RankRequest], cold: &[bool], scores: &[ItemScore]) -> Vec<RankResponse> {
    let mut at = 0;
    requests
        .iter()
        .zip(cold)
        .map(|(r, &cold_start)| {
            let n = r.candidates.len();
            let resp = RankResponse {
                user_id: r.user_id,
                cold_start,
                scores: scores[at..at + n].to_vec(),
            };
            at += n;
            resp
        })
        .collect()
}

impl Worker {
    /// Cold-start flags of the last batch, in request order.
    pub fn cold_flags(&self) -> &[bool] {
        &self.cold
    }
}
