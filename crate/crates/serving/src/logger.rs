//! NN feature logging: the assembled sequence each item was scored with is
//! written out as a training example, so training reads exactly what serving
//! computed instead of re-running the search over the full history.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_channel::{Receiver, Sender, TrySendError};
use seqrank_core::dataset::{Labels, TrainingExample};
use seqrank_core::nnsearch::{AssembledSequence, CandidateItem};

pub struct NnLogger {
    tx: Sender<TrainingExample>,
    written: AtomicU64,
    dropped: AtomicU64,
}

impl NnLogger {
    /// Logger over a channel holding at most `capacity` pending records.
    pub fn bounded(capacity: usize) -> (Self, Receiver<TrainingExample>) {
        let (tx, rx) = crossbeam_channel::bounded(capacity);
        let logger = NnLogger {
            tx,
            written: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        };
        (logger, rx)
    }

    /// Never blocks: a full or disconnected sink drops the record.
    pub fn log(&self, ex: TrainingExample) -> bool {
        match self.tx.try_send(ex) {
            Ok(()) => {
                self.written.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(TrySendError::Full(_) | TrySendError::Disconnected(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    pub fn written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// Training record for one served item. Labels are unknown at serving time
/// and are joined later; they start all false.
pub fn nn_record(user_id: u64, chunk_id: u64, request_ts: u32, item: &CandidateItem, assembled: AssembledSequence) -> TrainingExample {
    TrainingExample {
        user_id,
        chunk_id,
        item_id: item.item_id,
        request_ts,
        candidate: item.embedding,
        labels: Labels::default(),
        nn_features: Some(assembled),
    }
}
