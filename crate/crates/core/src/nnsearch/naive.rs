//! Broadcast NN pipeline: every item gets its own copy of the request's
//! sequences, each copy is dequantized and normalized into a materialized
//! buffer, scored, and fully argsorted. Slow on purpose; it is the oracle the
//! fused path is checked against and the serving baseline.

use super::{place_segment, rank_order, AssembledSequence, DedupBatch, NnConfig, Segment, SequenceView, Slot, SlotToken};
use crate::par::{self, Parallelism};
use crate::seqcore::{dequantize, l2_normalize, ActionToken, Embedding};

/// Working buffers, each at least as long as the longest list scored.
pub struct NaiveScratch<'a> {
    pub normed: &'a mut [Embedding],
    pub scores: &'a mut [f64],
    pub order: &'a mut [u32],
}

/// Owned buffers for the allocating entry points.
pub struct NaiveBuffers {
    normed: Vec<Embedding>,
    scores: Vec<f64>,
    order: Vec<u32>,
}

impl NaiveBuffers {
    pub fn new(max_list: usize) -> Self {
        NaiveBuffers {
            normed: vec![Embedding::zeros(); max_list],
            scores: vec![0.0; max_list],
            order: vec![0; max_list],
        }
    }

    pub fn scratch(&mut self) -> NaiveScratch<'_> {
        NaiveScratch {
            normed: &mut self.normed,
            scores: &mut self.scores,
            order: &mut self.order,
        }
    }
}

/// Scores every token of `list` against the normalized candidate and returns
/// the indices of the best `k`, best first.
pub fn select<'s>(list: &[ActionToken], cn: &Embedding, k: usize, s: &'s mut NaiveScratch<'_>) -> &'s [u32] {
    let n = list.len();
    for (dst, tok) in s.normed[..n].iter_mut().zip(list) {
        *dst = l2_normalize(&dequantize(&tok.embedding));
    }
    for (score, e) in s.scores[..n].iter_mut().zip(s.normed[..n].iter()) {
        *score = e.dot(cn);
    }
    let order = &mut s.order[..n];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i as u32;
    }
    let scores = &s.scores[..n];
    order.sort_unstable_by(|&a, &b| rank_order((scores[a as usize], a), (scores[b as usize], b)));
    &s.order[..k.min(n)]
}

/// Assembles into `out` (length `cfg.seq_len()`).
pub fn assemble_into(view: SequenceView<'_>, c: &Embedding, cfg: &NnConfig, s: &mut NaiveScratch<'_>, out: &mut [Slot]) -> [Segment; 4] {
    let cn = l2_normalize(c);
    let mut segs = cfg.segments();
    let head = view.realtime.len().min(cfg.r);
    let tail = &view.realtime[head..];

    let picked = select(view.lifelong, &cn, cfg.k_ll, s);
    place_segment(out, &mut segs[0], picked.iter().map(|&i| SlotToken { source: i, token: view.lifelong[i as usize] }));

    place_segment(
        out,
        &mut segs[1],
        view.realtime[..head].iter().enumerate().map(|(i, t)| SlotToken { source: i as u32, token: *t }),
    );

    let picked = select(tail, &cn, cfg.k_rt, s);
    place_segment(
        out,
        &mut segs[2],
        picked.iter().map(|&i| SlotToken { source: i + head as u32, token: tail[i as usize] }),
    );

    let picked = select(view.impression, &cn, cfg.k_imp, s);
    place_segment(out, &mut segs[3], picked.iter().map(|&i| SlotToken { source: i, token: view.impression[i as usize] }));
    segs
}

/// All per-token scores of `list`, in list order.
pub fn scores(list: &[ActionToken], c: &Embedding) -> Vec<f64> {
    let cn = l2_normalize(c);
    list.iter().map(|t| l2_normalize(&dequantize(&t.embedding)).dot(&cn)).collect()
}

/// Broadcasts each request to its items, then assembles each copy.
pub fn broadcast_assemble(batch: &DedupBatch, cfg: &NnConfig, parallelism: Parallelism) -> Vec<AssembledSequence> {
    let copies = batch.broadcast();
    par::map(&copies, parallelism, |(user, item)| {
        let mut bufs = NaiveBuffers::new(user.view().longest());
        let mut slots = vec![None; cfg.seq_len()];
        let segments = assemble_into(user.view(), &item.embedding, cfg, &mut bufs.scratch(), &mut slots);
        AssembledSequence { segments, slots }
    })
}
