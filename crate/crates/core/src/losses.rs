//! Multi-head weighted cross-entropy, the next-action loss and its sample
//! selection.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Real};
use crate::nnsearch::{AssembledSequence, SegmentKind};
use crate::seqcore::{l2_normalize, ActionToken, Head, NUM_HEADS};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Cross-entropy weight per head, in head order.
    pub ce_weights: [f64; NUM_HEADS],
    /// Utility weight per head for the final ranking score.
    pub utility: [f64; NUM_HEADS],
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            ce_weights: [1.0; NUM_HEADS],
            utility: [1.0, 0.5, 0.25, -2.0],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ce_weights.iter().chain(&self.utility).any(|w| !w.is_finite()) {
            return Err(Error::validation("head weights must be finite"));
        }
        Ok(())
    }

    pub fn weight(&self, h: Head) -> f64 {
        self.ce_weights[h as usize]
    }
}

/// Sum over heads of `-w [y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[eps, 1-eps]`.
pub fn weighted_ce(probs: &[f64; NUM_HEADS], labels: &[bool; NUM_HEADS], cfg: &HeadConfig) -> f64 {
    (0..NUM_HEADS)
        .map(|h| {
            let p = probs[h].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = labels[h];
            -cfg.ce_weights[h] * if y { p.ln() } else { (1.0 - p).ln() }
        })
        .sum()
}

/// [`weighted_ce`] from logits; writes `dL/dlogit` scaled by `scale` into
/// `dlogits`. Where the clamp is active the gradient is zero.
pub fn weighted_ce_logits<T: Real>(logits: &[T], labels: &[bool; NUM_HEADS], w: &[f64; NUM_HEADS], scale: T, dlogits: &mut [T]) -> T {
    let eps = T::of(PROB_EPS);
    let mut loss = T::zero();
    for h in 0..NUM_HEADS {
        let p = sigmoid(logits[h]);
        let pc = p.max(eps).min(T::one() - eps);
        let wh = T::of(w[h]);
        loss -= wh * if labels[h] { pc.ln() } else { (T::one() - pc).ln() };
        let y = if labels[h] { T::one() } else { T::zero() };
        dlogits[h] = if p == pc { scale * wh * (p - y) } else { T::zero() };
    }
    loss
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    InBatch,
    #[default]
    Impression,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NalLossType {
    #[default]
    SampledSoftmax,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NalConfig {
    pub w_nal: f64,
    /// Negatives per positive.
    pub negatives: usize,
    pub mode: NegativeMode,
    pub loss: NalLossType,
}

impl Default for NalConfig {
    fn default() -> Self {
        NalConfig {
            w_nal: 0.01,
            negatives: 16,
            mode: NegativeMode::Impression,
            loss: NalLossType::SampledSoftmax,
        }
    }
}

impl NalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_nal.is_finite() && self.w_nal >= 0.0) {
            return Err(Error::validation(format!("w_nal must be finite and >= 0, got {}", self.w_nal)));
        }
        if self.negatives == 0 {
            return Err(Error::validation("NAL needs at least one negative per positive"));
        }
        Ok(())
    }
}

/// `-log(e^{s_p} / (e^{s_p} + sum e^{s_n}))` for logits `[s_p, s_n...]`,
/// via log-sum-exp. Writes `dL/ds` into `grad` when given.
pub fn sampled_softmax_logits<T: Real>(logits: &[T], grad: Option<&mut [T]>) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(g) = grad {
        for (gi, &s) in g.iter_mut().zip(logits) {
            *gi = (s - lse).exp();
        }
        g[0] -= T::one();
    }
    // Clamp the tiny negative values rounding can produce.
    (lse - logits[0]).max(T::zero())
}

/// Per-positive binary cross-entropy: positive labelled 1, negatives 0.
pub fn binary_nal_logits<T: Real>(logits: &[T], grad: Option<&mut [T]>) -> T {
    let softplus = |x: T| if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let mut loss = softplus(-logits[0]);
    for &s in &logits[1..] {
        loss += softplus(s);
    }
    if let Some(g) = grad {
        g[0] = sigmoid(logits[0]) - T::one();
        for (gi, &s) in g[1..].iter_mut().zip(&logits[1..]) {
            *gi = sigmoid(s);
        }
    }
    loss
}

pub fn nal_logits_loss<T: Real>(kind: NalLossType, logits: &[T], grad: Option<&mut [T]>) -> T {
    match kind {
        NalLossType::SampledSoftmax => sampled_softmax_logits(logits, grad),
        NalLossType::CrossEntropy => binary_nal_logits(logits, grad),
    }
}

/// Sampled softmax on raw vectors: `z = u·proj` (`proj` is `d × emb`),
/// logits are inner products of `z` with the normalized positive and
/// negatives.
pub fn sampled_softmax(u: &[f64], pos: &[f64], negs: &[Vec<f64>], proj: &[f64]) -> f64 {
    let emb = pos.len();
    let z: Vec<f64> = (0..emb).map(|c| (0..u.len()).map(|r| u[r] * proj[r * emb + c]).sum()).collect();
    let unit = |e: &[f64]| {
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        e.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect::<Vec<_>>()
    };
    let mut logits = vec![crate::seqcore::dot(&z, &unit(pos))];
    logits.extend(negs.iter().map(|n| crate::seqcore::dot(&z, &unit(n))));
    sampled_softmax_logits(&logits, None)
}

/// Combined objective `ce + w_nal * nal`.
pub fn total_loss(ce: f64, nal: f64, cfg: &NalConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(ce + cfg.w_nal * nal)
}

/// One next-action prediction: the transformer output at `slot` should score
/// `positive` above `negatives`.
#[derive(Clone, Debug, PartialEq)]
pub struct NalTarget {
    pub slot: usize,
    pub positive: Vec<f64>,
    /// `negatives.len() == N`, each a normalized embedding.
    pub negatives: Vec<Vec<f64>>,
}

/// One batch element as seen by sample selection.
pub struct NalSource<'a> {
    pub user_id: u64,
    pub assembled: &'a AssembledSequence,
    pub realtime: &'a [ActionToken],
    pub impression: &'a [ActionToken],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NalSelection {
    /// Targets per batch element.
    pub targets: Vec<Vec<NalTarget>>,
    pub positives: usize,
    /// In-batch mode with no other user in the batch: impression mode used.
    pub fallback_warnings: usize,
    /// Impression mode with an empty impression list: in-batch negatives used.
    pub impression_fallbacks: usize,
    /// Positives dropped because no negative source existed at all.
    pub skipped: usize,
}

fn unit_embedding(t: &ActionToken) -> Vec<f64> {
    l2_normalize(&t.embedding.dequantize()).as_slice().to_vec()
}

/// `n` draws from `list`: without replacement when it is long enough, else with.
fn draw(rng: &mut impl Rng, list: &[ActionToken], n: usize) -> Vec<Vec<f64>> {
    if list.len() >= n {
        sample(rng, list.len(), n).into_iter().map(|i| unit_embedding(&list[i])).collect()
    } else {
        (0..n).map(|_| unit_embedding(&list[rng.random_range(0..list.len())])).collect()
    }
}

/// Positives are the tokens of the recent real-time segment carrying a
/// positive action bit; each is predicted from the slot right before it in
/// that segment (the segment's first token has no predictor).
pub fn positive_slots(seq: &AssembledSequence) -> Vec<(usize, usize)> {
    let seg = seq.segment(SegmentKind::RealtimeRecent);
    seg.valid_range()
        .skip(1)
        .filter(|&i| seq.slots[i].as_ref().is_some_and(|s| s.token.action.is_positive()))
        .map(|i| (i - 1, i))
        .collect()
}

pub fn select_samples<R: Rng>(batch: &[NalSource<'_>], cfg: &NalConfig, rng: &mut R) -> NalSelection {
    let n = cfg.negatives;
    let mut out = NalSelection::default();
    for src in batch {
        let mut targets = Vec::new();
        // Other users in the batch who have real-time tokens to offer.
        let donors: Vec<usize> = (0..batch.len())
            .filter(|&j| batch[j].user_id != src.user_id && !batch[j].realtime.is_empty())
            .collect();
        let any_other = batch.iter().any(|b| b.user_id != src.user_id);
        for (slot, at) in positive_slots(src.assembled) {
            let positive = unit_embedding(&src.assembled.slots[at].as_ref().expect("valid slot").token);
            let in_batch = |rng: &mut R| -> Option<Vec<Vec<f64>>> {
                if donors.is_empty() {
                    return None;
                }
                let j = donors[rng.random_range(0..donors.len())];
                Some(draw(rng, batch[j].realtime, n))
            };
            let impression = |rng: &mut R| -> Option<Vec<Vec<f64>>> {
                (!src.impression.is_empty()).then(|| draw(rng, src.impression, n))
            };
            let negatives = match cfg.mode {
                NegativeMode::Impression => impression(rng).or_else(|| {
                    out.impression_fallbacks += 1;
                    in_batch(rng)
                }),
                NegativeMode::InBatch => {
                    if !any_other {
                        out.fallback_warnings += 1;
                        impression(rng)
                    } else {
                        in_batch(rng).or_else(|| impression(rng))
                    }
                }
            };
            match negatives {
                Some(negatives) => targets.push(NalTarget { slot, positive, negatives }),
                None => out.skipped += 1,
            }
        }
        out.positives += targets.len();
        out.targets.push(targets);
    }
    out
}
