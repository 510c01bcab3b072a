//! Request-level de-duplication: sequence features stored once per request,
//! with one offset per candidate item pointing at its request.

use crate::dataset::TOKEN_BYTES;
use crate::error::{Error, Result};
use crate::seqcore::{Embedding, UserSequences};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateItem {
    pub item_id: u64,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DedupBatch {
    pub unique_requests: Vec<UserSequences>,
    /// `offsets[i]` indexes the request of `items[i]`.
    pub offsets: Vec<u32>,
    pub items: Vec<CandidateItem>,
}

/// Packed sequence-feature bytes of one user (all three lists).
pub fn sequence_bytes(user: &UserSequences) -> u64 {
    (user.total_tokens() * TOKEN_BYTES) as u64
}

/// One feature block per request regardless of its candidate count; item
/// order is preserved. Requests without candidates are rejected since every
/// stored block must be referenced.
pub fn build_dedup_batch(requests: Vec<(UserSequences, Vec<CandidateItem>)>) -> Result<DedupBatch> {
    if requests.is_empty() {
        return Err(Error::validation("batch needs at least one request"));
    }
    let n_items = requests.iter().map(|r| r.1.len()).sum();
    let mut batch = DedupBatch {
        unique_requests: Vec::with_capacity(requests.len()),
        offsets: Vec::with_capacity(n_items),
        items: Vec::with_capacity(n_items),
    };
    for (i, (user, cands)) in requests.into_iter().enumerate() {
        if cands.is_empty() {
            return Err(Error::validation(format!("request {i} has no candidates")));
        }
        let idx = batch.unique_requests.len() as u32;
        batch.unique_requests.push(user);
        batch.offsets.extend(std::iter::repeat_n(idx, cands.len()));
        batch.items.extend(cands);
    }
    Ok(batch)
}

impl DedupBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn request_of(&self, item: usize) -> &UserSequences {
        &self.unique_requests[self.offsets[item] as usize]
    }

    /// Bytes of sequence features held by the batch.
    pub fn sequence_feature_bytes(&self) -> u64 {
        self.unique_requests.iter().map(sequence_bytes).sum()
    }

    /// Bytes the same batch would hold if features were broadcast to every item.
    pub fn broadcast_sequence_feature_bytes(&self) -> u64 {
        (0..self.len()).map(|i| sequence_bytes(self.request_of(i))).sum()
    }

    /// Per-item copies of the request features: the layout de-duplication avoids.
    pub fn broadcast(&self) -> Vec<(UserSequences, CandidateItem)> {
        (0..self.len()).map(|i| (self.request_of(i).clone(), self.items[i])).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.offsets.len() != self.items.len() {
            return Err(Error::validation("offsets and items differ in length"));
        }
        let mut seen = vec![false; self.unique_requests.len()];
        for &o in &self.offsets {
            let o = o as usize;
            if o >= seen.len() {
                return Err(Error::validation(format!("offset {o} out of range")));
            }
            seen[o] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::validation("unreferenced request block"));
        }
        Ok(())
    }
}
