//! Broadcast-free NN assembly over de-duplicated requests.
//!
//! Each token is dequantized, normalized and scored in registers and fed
//! straight into a bounded top-K heap; nothing proportional to the sequence
//! length is written per item. The arithmetic (f64 squared-norm accumulation
//! in index order, per-component division, sequential dot product) mirrors
//! `seqcore::l2_normalize` + `seqcore::dot` so the selected indices are
//! exactly those of the broadcast path.

use super::{place_segment, AssembledSequence, DedupBatch, NnConfig, Segment, SequenceView, Slot, SlotToken, TopK};
use crate::par::{self, Parallelism};
use crate::seqcore::{l2_normalize, ActionToken, Embedding, EMBED_DIM, QUANT_MAX, QUANT_RANGE};

#[inline]
pub fn token_score(codes: &[i8; EMBED_DIM], cn: &[f64; EMBED_DIM]) -> f64 {
    let mut deq = [0f64; EMBED_DIM];
    let mut sumsq = 0f64;
    for (d, &q) in deq.iter_mut().zip(codes.iter()) {
        let e = f64::from(q) / f64::from(QUANT_MAX) * QUANT_RANGE;
        *d = e;
        sumsq += e * e;
    }
    if sumsq == 0.0 {
        return 0.0;
    }
    let norm = sumsq.sqrt();
    let mut acc = 0f64;
    for (d, c) in deq.iter().zip(cn.iter()) {
        acc += (d / norm) * c;
    }
    acc
}

/// Best `k` of `list` as `(score, index)`, best first. `heap` must hold at least `k` entries.
pub fn select<'h>(list: &[ActionToken], cn: &Embedding, k: usize, heap: &'h mut [(f64, u32)]) -> &'h [(f64, u32)] {
    let cap = k.min(list.len());
    let mut top = TopK::new(&mut heap[..cap]);
    let cn = cn.as_array();
    for (i, tok) in list.iter().enumerate() {
        top.offer(token_score(tok.embedding.codes(), cn), i as u32);
    }
    top.into_sorted()
}

/// Heap entries needed for `cfg`.
pub fn heap_len(cfg: &NnConfig) -> usize {
    cfg.k_ll.max(cfg.k_rt).max(cfg.k_imp)
}

/// Assembles into `out` (length `cfg.seq_len()`) reading the request's lists in place.
pub fn assemble_into(view: SequenceView<'_>, c: &Embedding, cfg: &NnConfig, heap: &mut [(f64, u32)], out: &mut [Slot]) -> [Segment; 4] {
    let cn = l2_normalize(c);
    let mut segs = cfg.segments();
    let head = view.realtime.len().min(cfg.r);
    let tail = &view.realtime[head..];

    let picked = select(view.lifelong, &cn, cfg.k_ll, heap);
    place_segment(out, &mut segs[0], picked.iter().map(|&(_, i)| SlotToken { source: i, token: view.lifelong[i as usize] }));

    place_segment(
        out,
        &mut segs[1],
        view.realtime[..head].iter().enumerate().map(|(i, t)| SlotToken { source: i as u32, token: *t }),
    );

    let picked = select(tail, &cn, cfg.k_rt, heap);
    place_segment(
        out,
        &mut segs[2],
        picked.iter().map(|&(_, i)| SlotToken { source: i + head as u32, token: tail[i as usize] }),
    );

    let picked = select(view.impression, &cn, cfg.k_imp, heap);
    place_segment(out, &mut segs[3], picked.iter().map(|&(_, i)| SlotToken { source: i, token: view.impression[i as usize] }));
    segs
}

/// Assembled sequence for every item of the batch, reading each request's
/// features once from the de-duplicated storage.
pub fn fused_assemble(batch: &DedupBatch, cfg: &NnConfig, parallelism: Parallelism) -> Vec<AssembledSequence> {
    par::map_range(batch.len(), parallelism, |i| {
        let mut heap = vec![(0f64, 0u32); heap_len(cfg)];
        let mut slots = vec![None; cfg.seq_len()];
        let view = batch.request_of(i).view();
        let segments = assemble_into(view, &batch.items[i].embedding, cfg, &mut heap, &mut slots);
        AssembledSequence { segments, slots }
    })
}
