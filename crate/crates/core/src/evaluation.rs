//! Offline ranking metrics: the linear final score and HIT@K per head.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::dataset::TrainingExample;
use crate::error::Result;
use crate::losses::HeadConfig;
use crate::model::{assembled_for, example_input, score, Kernel, RankingModel};
use crate::nnsearch::NnConfig;
use crate::par::{self, Parallelism};
use crate::scratch::HeapScratch;
use crate::seqcore::{Head, UserSequences, NUM_HEADS};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredItem {
    pub user_id: u64,
    pub chunk_id: u64,
    pub pin_id: u64,
    pub probs: [f64; NUM_HEADS],
    pub labels: [bool; NUM_HEADS],
}

/// `Σ_h utility_h · p_h`.
pub fn final_score(item: &ScoredItem, cfg: &HeadConfig) -> f64 {
    item.probs.iter().zip(&cfg.utility).map(|(p, w)| p * w).sum()
}

/// Items of each `(user, chunk)` in ranked order: final score descending,
/// ties by pin id ascending.
fn ranked_chunks<'a>(items: &'a [ScoredItem], cfg: &HeadConfig) -> BTreeMap<(u64, u64), Vec<(f64, &'a ScoredItem)>> {
    let mut chunks: BTreeMap<(u64, u64), Vec<(f64, &ScoredItem)>> = BTreeMap::new();
    for it in items {
        chunks.entry((it.user_id, it.chunk_id)).or_default().push((final_score(it, cfg), it));
    }
    for v in chunks.values_mut() {
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.pin_id.cmp(&b.1.pin_id)));
    }
    chunks
}

/// Label-1 items of `head` among the top `k` of every chunk, summed and
/// divided by the number of distinct users.
pub fn hit_at_k(items: &[ScoredItem], k: usize, head: Head, cfg: &HeadConfig) -> f64 {
    hit_at_k_all(items, k, cfg)[head as usize]
}

pub fn hit_at_k_all(items: &[ScoredItem], k: usize, cfg: &HeadConfig) -> [f64; NUM_HEADS] {
    let chunks = ranked_chunks(items, cfg);
    let users = chunks.keys().map(|(u, _)| *u).collect::<std::collections::BTreeSet<_>>().len();
    let mut hits = [0usize; NUM_HEADS];
    for ranked in chunks.values() {
        for (_, it) in ranked.iter().take(k) {
            for (h, l) in hits.iter_mut().zip(&it.labels) {
                *h += usize::from(*l);
            }
        }
    }
    if users == 0 {
        return [0.0; NUM_HEADS];
    }
    hits.map(|h| h as f64 / users as f64)
}

/// Scores examples with a trained model.
pub fn predict(
    model: &RankingModel,
    examples: &[TrainingExample],
    users: &HashMap<u64, &UserSequences>,
    nn: &NnConfig,
    kernel: Kernel,
    parallelism: Parallelism,
) -> Result<Vec<ScoredItem>> {
    nn.expect_len(model.dims().seq_len)?;
    let scored = par::map(examples, parallelism, |ex| -> Result<ScoredItem> {
        let seq = assembled_for(ex, users.get(&ex.user_id).copied(), nn)?;
        let input = example_input::<f32>(ex, &seq);
        let mut probs = [0.0f32; NUM_HEADS];
        score(
            &model.params,
            model.use_sequence,
            &input.seq.view(),
            &input.cand,
            &input.ctx,
            kernel,
            &HeapScratch::new(),
            &mut probs,
        )?;
        Ok(ScoredItem {
            user_id: ex.user_id,
            chunk_id: ex.chunk_id,
            pin_id: ex.item_id,
            probs: probs.map(f64::from),
            labels: ex.labels.0,
        })
    });
    scored.into_iter().collect()
}

/// One named run's HIT@K per head.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    pub hit: [f64; NUM_HEADS],
}

/// Relative change in percent; NaN when the baseline is zero.
pub fn pct_delta(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        f64::NAN
    } else {
        100.0 * (value - baseline) / baseline
    }
}

/// Text table of HIT@`k` per head with percentage deltas against the run
/// named `baseline` (if present).
pub fn format_report(runs: &[RunMetrics], k: usize, baseline: Option<&str>) -> String {
    let base = baseline.and_then(|b| runs.iter().find(|r| r.name == b));
    let width = runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "run");
    for h in Head::ALL {
        let arrow = if h.lower_is_better() { "↓" } else { "↑" };
        let _ = write!(out, "  {:>22}", format!("HIT@{k}/{}{arrow}", h.name()));
    }
    out.push('\n');
    for r in runs {
        let _ = write!(out, "{:width$}", r.name);
        for h in Head::ALL {
            let v = r.hit[h as usize];
            let cell = match base {
                Some(b) if b.name != r.name => format!("{v:.4} ({:+.2}%)", pct_delta(v, b.hit[h as usize])),
                _ => format!("{v:.4}"),
            };
            let _ = write!(out, "  {cell:>22}");
        }
        out.push('\n');
    }
    out
}
