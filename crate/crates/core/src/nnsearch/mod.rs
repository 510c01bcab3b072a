//! Candidate-anchored nearest-neighbour selection and sequence assembly.
//!
//! For a candidate `c` the assembled sequence is the concatenation
//!
//! ```text
//! NN(lifelong, c) ++ realtime[..r] ++ NN(realtime[r..], c) ++ NN(impression, c)
//! ```
//!
//! where `NN(S, c)` keeps the `k` tokens of `S` whose normalized dequantized
//! embedding has the largest inner product with the normalized candidate.
//! Each segment has a fixed capacity; unfilled slots are padding. Within a
//! segment tokens are ordered oldest first.
//!
//! Three implementations share this contract:
//! * [`top_k_nn`] / [`assemble`] — the plain per-item API,
//! * [`naive`] — the broadcast pipeline that materializes per-item normalized
//!   sequence copies and fully sorts (the oracle),
//! * [`fused`] — dequantize, normalize, score and select in one pass directly
//!   over de-duplicated request storage.

pub mod dedup;
pub mod fused;
pub mod naive;
mod topk;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::seqcore::{ActionToken, Embedding, UserSequences, EMBED_DIM};

pub use dedup::{build_dedup_batch, CandidateItem, DedupBatch};
pub use topk::TopK;

/// Segment capacities of the assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NnConfig {
    /// Most recent real-time actions always kept.
    pub r: usize,
    pub k_ll: usize,
    pub k_rt: usize,
    pub k_imp: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            r: 32,
            k_ll: 96,
            k_rt: 32,
            k_imp: 32,
        }
    }
}

impl NnConfig {
    pub fn seq_len(&self) -> usize {
        self.r + self.k_ll + self.k_rt + self.k_imp
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len() == 0 {
            return Err(Error::validation("assembled sequence length must be > 0"));
        }
        if self.seq_len() > u16::MAX as usize {
            return Err(Error::validation("assembled sequence length exceeds 65535"));
        }
        Ok(())
    }

    /// Checks the configured length against an expected |S_all|.
    pub fn expect_len(&self, seq_len: usize) -> Result<()> {
        self.validate()?;
        if self.seq_len() != seq_len {
            return Err(Error::validation(format!(
                "r + k_ll + k_rt + k_imp = {} but sequence length is {seq_len}",
                self.seq_len()
            )));
        }
        Ok(())
    }

    /// Empty segment layout in concatenation order.
    pub fn segments(&self) -> [Segment; 4] {
        let caps = [self.k_ll, self.r, self.k_rt, self.k_imp];
        let mut start = 0;
        SegmentKind::ALL.map(|kind| {
            let cap = caps[kind as usize];
            let seg = Segment {
                kind,
                start,
                capacity: cap,
                filled: 0,
            };
            start += cap;
            seg
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SegmentKind {
    LifelongNn = 0,
    RealtimeRecent = 1,
    RealtimeNn = 2,
    ImpressionNn = 3,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::LifelongNn,
        SegmentKind::RealtimeRecent,
        SegmentKind::RealtimeNn,
        SegmentKind::ImpressionNn,
    ];
}

/// One contiguous slice of the assembled sequence. Valid tokens occupy
/// `start..start + filled`; the rest up to `capacity` is padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub capacity: usize,
    pub filled: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.capacity
    }

    pub fn valid_range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.filled
    }
}

/// A selected token and its index in the list it came from
/// (lifelong, real-time or impression).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotToken {
    pub source: u32,
    pub token: ActionToken,
}

/// `None` marks padding.
pub type Slot = Option<SlotToken>;

/// Assembled input sequence for one (user, candidate) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledSequence {
    pub segments: [Segment; 4],
    pub slots: Vec<Slot>,
}

/// Serialized size of one slot: source u32 + packed token.
pub const SLOT_BYTES: usize = 4 + crate::dataset::TOKEN_BYTES;
const PAD_SOURCE: u32 = u32::MAX;

impl AssembledSequence {
    /// Fully padded sequence.
    pub fn empty(cfg: &NnConfig) -> Self {
        AssembledSequence {
            segments: cfg.segments(),
            slots: vec![None; cfg.seq_len()],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        &self.segments[kind as usize]
    }

    /// Checks segment bookkeeping, padding placement and per-segment ordering.
    pub fn check_invariants(&self) -> Result<()> {
        let total: usize = self.segments.iter().map(|s| s.capacity).sum();
        if total != self.slots.len() {
            return Err(Error::validation("segment capacities do not sum to sequence length"));
        }
        let mut start = 0;
        for (seg, kind) in self.segments.iter().zip(SegmentKind::ALL) {
            if seg.kind != kind || seg.start != start || seg.filled > seg.capacity {
                return Err(Error::validation(format!("bad segment layout {seg:?}")));
            }
            start += seg.capacity;
            let slots = &self.slots[seg.range()];
            if slots[..seg.filled].iter().any(Option::is_none) || slots[seg.filled..].iter().any(Option::is_some) {
                return Err(Error::validation(format!("{kind:?}: padding is not at the segment tail")));
            }
            let sorted = slots[..seg.filled]
                .windows(2)
                .all(|w| slot_order(w[0].as_ref().unwrap(), w[1].as_ref().unwrap()) == Ordering::Less);
            if !sorted {
                return Err(Error::validation(format!("{kind:?}: tokens not in timestamp order")));
            }
        }
        Ok(())
    }

    /// Appends the packed form: four u16 segment fill counts, then one
    /// [`SLOT_BYTES`] record per slot (padding uses source `u32::MAX` and zero bytes).
    pub fn write_to(&self, out: &mut Vec<u8>) {
        for seg in &self.segments {
            out.extend_from_slice(&(seg.filled as u16).to_le_bytes());
        }
        for slot in &self.slots {
            match slot {
                Some(s) => {
                    out.extend_from_slice(&s.source.to_le_bytes());
                    crate::dataset::write_token(out, &s.token);
                }
                None => {
                    out.extend_from_slice(&PAD_SOURCE.to_le_bytes());
                    out.extend_from_slice(&[0u8; crate::dataset::TOKEN_BYTES]);
                }
            }
        }
    }

    pub fn encoded_len(seq_len: usize) -> usize {
        8 + seq_len * SLOT_BYTES
    }

    pub(crate) fn read_from(r: &mut crate::dataset::ByteReader<'_>, cfg: &NnConfig) -> Result<Self> {
        let mut segments = cfg.segments();
        for seg in segments.iter_mut() {
            let at = r.offset();
            seg.filled = r.u16()? as usize;
            if seg.filled > seg.capacity {
                return Err(Error::format(at, format!("{:?} fill {} exceeds capacity {}", seg.kind, seg.filled, seg.capacity)));
            }
        }
        let mut slots = Vec::with_capacity(cfg.seq_len());
        for _ in 0..cfg.seq_len() {
            let at = r.offset();
            let source = r.u32()?;
            if source == PAD_SOURCE {
                let pad = r.bytes(crate::dataset::TOKEN_BYTES)?;
                if pad.iter().any(|&b| b != 0) {
                    return Err(Error::format(at, "padding slot carries token bytes"));
                }
                slots.push(None);
            } else {
                slots.push(Some(SlotToken {
                    source,
                    token: crate::dataset::read_token(r)?,
                }));
            }
        }
        let seq = AssembledSequence { segments, slots };
        seq.check_invariants().map_err(|e| Error::format(r.offset(), e.to_string()))?;
        Ok(seq)
    }
}

/// Borrowed view of the three lists of one user.
#[derive(Clone, Copy, Debug)]
pub struct SequenceView<'a> {
    pub lifelong: &'a [ActionToken],
    pub realtime: &'a [ActionToken],
    pub impression: &'a [ActionToken],
}

impl<'a> SequenceView<'a> {
    pub const EMPTY: SequenceView<'static> = SequenceView {
        lifelong: &[],
        realtime: &[],
        impression: &[],
    };

    pub fn longest(&self) -> usize {
        self.lifelong.len().max(self.realtime.len()).max(self.impression.len())
    }
}

impl UserSequences {
    pub fn view(&self) -> SequenceView<'_> {
        SequenceView {
            lifelong: &self.lifelong,
            realtime: &self.realtime,
            impression: &self.impression,
        }
    }
}

/// Order within a segment: oldest first; equal timestamps put the larger
/// source index (older in most-recent-first storage) first.
pub(crate) fn slot_order(a: &SlotToken, b: &SlotToken) -> Ordering {
    a.token
        .timestamp
        .cmp(&b.token.timestamp)
        .then_with(|| b.source.cmp(&a.source))
}

/// Ranking order for NN selection: higher score first, then smaller index.
#[inline]
pub(crate) fn rank_order(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Similarity used for NN selection: `<normalize(dequantize(token)), normalize(c)>`.
pub fn nn_score(token: &ActionToken, candidate_normalized: &Embedding) -> f64 {
    let e = crate::seqcore::l2_normalize(&token.embedding.dequantize());
    e.dot(candidate_normalized)
}

/// Indices of the `k` tokens most similar to `c`, best first; ties go to the
/// smaller index (the more recent action).
pub fn top_k_nn(seq: &[ActionToken], c: &Embedding, k: usize) -> Vec<usize> {
    let cn = crate::seqcore::l2_normalize(c);
    let mut buf = vec![(0f64, 0u32); k.min(seq.len())];
    let mut top = TopK::new(&mut buf);
    for (i, tok) in seq.iter().enumerate() {
        top.offer(nn_score(tok, &cn), i as u32);
    }
    top.into_sorted().iter().map(|&(_, i)| i as usize).collect()
}

/// Builds the assembled sequence for one candidate.
pub fn assemble(user: &UserSequences, c: &Embedding, cfg: &NnConfig) -> AssembledSequence {
    let mut segments = cfg.segments();
    let mut slots = vec![None; cfg.seq_len()];
    let view = user.view();

    let pick = |list: &[ActionToken], offset: usize, k: usize| -> Vec<SlotToken> {
        top_k_nn(list, c, k)
            .into_iter()
            .map(|i| SlotToken {
                source: (i + offset) as u32,
                token: list[i],
            })
            .collect()
    };
    let head = view.realtime.len().min(cfg.r);
    let chosen: [Vec<SlotToken>; 4] = [
        pick(view.lifelong, 0, cfg.k_ll),
        view.realtime[..head]
            .iter()
            .enumerate()
            .map(|(i, t)| SlotToken { source: i as u32, token: *t })
            .collect(),
        pick(&view.realtime[head..], head, cfg.k_rt),
        pick(view.impression, 0, cfg.k_imp),
    ];
    for (seg, mut picked) in segments.iter_mut().zip(chosen) {
        picked.sort_unstable_by(slot_order);
        seg.filled = picked.len();
        for (slot, tok) in slots[seg.start..].iter_mut().zip(picked) {
            *slot = Some(tok);
        }
    }
    AssembledSequence { segments, slots }
}

/// Dense f32 rows for the token half of the model input: one normalized
/// dequantized embedding per slot, zeros for padding.
pub fn slot_embeddings(slots: &[Slot], out: &mut [f32]) {
    debug_assert_eq!(out.len(), slots.len() * EMBED_DIM);
    for (slot, row) in slots.iter().zip(out.chunks_exact_mut(EMBED_DIM)) {
        match slot {
            Some(s) => {
                let e = crate::seqcore::l2_normalize(&s.token.embedding.dequantize());
                for (o, v) in row.iter_mut().zip(e.as_array()) {
                    *o = *v as f32;
                }
            }
            None => row.fill(0.0),
        }
    }
}

/// Writes picked tokens into a segment's slots, pads the tail and orders the
/// valid part oldest first.
pub(crate) fn place_segment(out: &mut [Slot], seg: &mut Segment, picked: impl Iterator<Item = SlotToken>) {
    let region = &mut out[seg.start..seg.start + seg.capacity];
    let mut n = 0;
    for (slot, tok) in region.iter_mut().zip(picked) {
        *slot = Some(tok);
        n += 1;
    }
    region[n..].fill(None);
    seg.filled = n;
    region[..n].sort_unstable_by(|a, b| slot_order(a.as_ref().unwrap(), b.as_ref().unwrap()));
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use crate::seqcore::{ActionType, QuantizedEmbedding};

    fn axis_token(ts: u32, axis: usize, code: i8) -> ActionToken {
        let mut q = [0i8; EMBED_DIM];
        q[axis] = code;
        q[31] = 40;
        ActionToken::new(ts, ActionType::new(ActionType::REPIN).unwrap(), 0, QuantizedEmbedding::new(q).unwrap()).unwrap()
    }

    fn unit_candidate(axis: usize) -> Embedding {
        let mut v = [0f64; EMBED_DIM];
        v[axis] = 0.5;
        Embedding::new(v).unwrap()
    }

    #[test]
    fn top_k_examples() {
        // Build three tokens whose dot products with the candidate are ordered (high, low, mid).
        let mk = |ts, a: f64| {
            let mut v = [0f64; EMBED_DIM];
            v[0] = a;
            v[1] = (1.0 - a * a).sqrt();
            ActionToken::new(ts, ActionType::new(1).unwrap(), 0, Embedding::new(v.map(|x| x * 0.6)).unwrap().quantize())
                .unwrap()
        };
        let seq = vec![mk(30, 0.9), mk(20, 0.1), mk(10, 0.5)];
        let c = unit_candidate(0);
        let dots: Vec<f64> = seq.iter().map(|t| nn_score(t, &crate::seqcore::l2_normalize(&c))).collect();
        assert!(dots[0] > dots[2] && dots[2] > dots[1]);
        let mut got = top_k_nn(&seq, &c, 2);
        got.sort();
        assert_eq!(got, vec![0, 2]);
        assert!(top_k_nn(&seq, &c, 0).is_empty());
        assert_eq!(top_k_nn(&seq, &c, 10).len(), 3);

        let twin = vec![seq[0], seq[0]];
        assert_eq!(top_k_nn(&twin, &c, 1), vec![0]);
    }

    #[test]
    fn assemble_empty_user_is_fully_masked() {
        let cfg = NnConfig::default();
        let a = assemble(&UserSequences::empty(), &unit_candidate(0), &cfg);
        assert_eq!(a.len(), 192);
        assert_eq!(a.valid_count(), 0);
        assert_eq!(a, AssembledSequence::empty(&cfg));
        a.check_invariants().unwrap();
    }

    #[test]
    fn realtime_tail_empty_when_exactly_r() {
        let cfg = NnConfig { r: 4, k_ll: 2, k_rt: 3, k_imp: 1 };
        let mut rng = rng(3);
        let user = UserSequences {
            lifelong: vec![],
            realtime: random_list(&mut rng, 4, false),
            impression: vec![],
        };
        let a = assemble(&user, &random_embedding(&mut rng), &cfg);
        assert_eq!(a.segment(SegmentKind::RealtimeRecent).filled, 4);
        assert_eq!(a.segment(SegmentKind::RealtimeNn).filled, 0);
        // Most recent r actions, oldest first.
        let head: Vec<u32> = a.slots[a.segment(SegmentKind::RealtimeRecent).valid_range()]
            .iter()
            .map(|s| s.unwrap().source)
            .collect();
        assert_eq!(head, vec![3, 2, 1, 0]);
        a.check_invariants().unwrap();
    }

    #[test]
    fn crafted_lifelong_selection() {
        // Ten tokens; token i has a component along the candidate axis of (i*7 mod 10) * 10.
        let codes: Vec<i8> = (0..10).map(|i| ((i * 7) % 10) as i8 * 10).collect();
        let ll: Vec<ActionToken> = codes.iter().enumerate().map(|(i, &c)| axis_token(1000 - i as u32, 0, c)).collect();
        let user = UserSequences { lifelong: ll.clone(), ..Default::default() };
        let cand = unit_candidate(0);
        let cfg = NnConfig { r: 0, k_ll: 4, k_rt: 0, k_imp: 0 };

        // Exhaustive oracle: sort all by score (desc), keep 4, then order by timestamp.
        let cn = crate::seqcore::l2_normalize(&cand);
        let mut all: Vec<(f64, usize)> = ll.iter().enumerate().map(|(i, t)| (nn_score(t, &cn), i)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = all[..4].iter().map(|x| x.1).collect();
        expect.sort_by_key(|&i| ll[i].timestamp);

        let a = assemble(&user, &cand, &cfg);
        let got: Vec<usize> = a.slots.iter().map(|s| s.unwrap().source as usize).collect();
        assert_eq!(got, expect);
        // The largest axis codes are 90, 80, 70, 60 at indices 7, 4, 1, 8.
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 4, 7, 8]);
    }

    #[test]
    fn segments_follow_concatenation_order() {
        let mut rng = rng(11);
        let cfg = NnConfig { r: 3, k_ll: 5, k_rt: 2, k_imp: 4 };
        for _ in 0..200 {
            let user = random_user(&mut rng, 12, 8, 6);
            let a = assemble(&user, &random_embedding(&mut rng), &cfg);
            a.check_invariants().unwrap();
            let kinds: Vec<SegmentKind> = a.segments.iter().map(|s| s.kind).collect();
            assert_eq!(kinds, SegmentKind::ALL.to_vec());
            assert_eq!(a.segment(SegmentKind::LifelongNn).filled, user.lifelong.len().min(5));
            assert_eq!(a.segment(SegmentKind::RealtimeRecent).filled, user.realtime.len().min(3));
            assert_eq!(a.segment(SegmentKind::RealtimeNn).filled, user.realtime.len().saturating_sub(3).min(2));
            for s in a.slots[a.segment(SegmentKind::RealtimeNn).valid_range()].iter() {
                assert!(s.unwrap().source >= 3);
            }
            for s in a.slots[a.segment(SegmentKind::ImpressionNn).valid_range()].iter() {
                assert!(s.unwrap().token.action.is_impression());
            }
        }
    }

    #[test]
    fn packed_round_trip() {
        let mut rng = rng(5);
        let cfg = NnConfig { r: 3, k_ll: 5, k_rt: 2, k_imp: 4 };
        let user = random_user(&mut rng, 12, 8, 6);
        let a = assemble(&user, &random_embedding(&mut rng), &cfg);
        let mut buf = Vec::new();
        a.write_to(&mut buf);
        assert_eq!(buf.len(), AssembledSequence::encoded_len(cfg.seq_len()));
        let mut r = crate::dataset::ByteReader::new(&buf);
        assert_eq!(AssembledSequence::read_from(&mut r, &cfg).unwrap(), a);
    }
}
