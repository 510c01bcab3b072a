//! In-memory feature store: user id → immutable sequence snapshot.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use seqrank_core::dataset::SequenceStore;
use seqrank_core::seqcore::{SequenceCaps, UserSequences};

use crate::error::Result;

/// Writers replace whole `Arc` snapshots, so a reader holding one sees a
/// consistent set of lists no matter what is written afterwards.
pub struct FeatureStore {
    users: RwLock<HashMap<u64, Arc<UserSequences>>>,
    generation: AtomicU64,
    caps: SequenceCaps,
}

impl Default for FeatureStore {
    fn default() -> Self {
        Self::new(SequenceCaps::default())
    }
}

impl FeatureStore {
    pub fn new(caps: SequenceCaps) -> Self {
        FeatureStore {
            users: RwLock::new(HashMap::new()),
            generation: AtomicU64::new(0),
            caps,
        }
    }

    pub fn from_sequences(store: &SequenceStore, caps: SequenceCaps) -> Result<Self> {
        let fs = Self::new(caps);
        for rec in &store.records {
            fs.put(rec.user_id, rec.sequences.clone())?;
        }
        Ok(fs)
    }

    pub fn caps(&self) -> &SequenceCaps {
        &self.caps
    }

    /// Replaces the user's sequences. Lists over the caps are rejected.
    pub fn put(&self, user_id: u64, seqs: UserSequences) -> Result<u64> {
        seqs.validate(&self.caps)?;
        let snapshot = Arc::new(seqs);
        let mut users = self.users.write();
        users.insert(user_id, snapshot);
        Ok(self.generation.fetch_add(1, Ordering::AcqRel) + 1)
    }

    pub fn get(&self, user_id: u64) -> Option<Arc<UserSequences>> {
        self.users.read().get(&user_id).cloned()
    }

    pub fn remove(&self, user_id: u64) -> bool {
        let removed = self.users.write().remove(&user_id).is_some();
        if removed {
            self.generation.fetch_add(1, Ordering::AcqRel);
        }
        removed
    }

    /// Number of completed writes.
    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.users.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqrank_core::seqcore::{ActionToken, ActionType, QuantizedEmbedding};

    fn user(n_ll: usize, ts: u32) -> UserSequences {
        let tok = ActionToken::new(ts, ActionType::new(1).unwrap(), 0, QuantizedEmbedding::zeros()).unwrap();
        UserSequences {
            lifelong: vec![tok; n_ll],
            ..Default::default()
        }
    }

    #[test]
    fn put_get_and_generation() {
        let s = FeatureStore::default();
        assert!(s.get(1).is_none());
        assert_eq!(s.put(1, user(3, 10)).unwrap(), 1);
        let snap = s.get(1).unwrap();
        s.put(1, user(5, 20)).unwrap();
        // The earlier snapshot is unaffected by the overwrite.
        assert_eq!(snap.lifelong.len(), 3);
        assert_eq!(s.get(1).unwrap().lifelong.len(), 5);
        assert_eq!(s.generation(), 2);
        assert!(s.remove(1));
        assert!(!s.remove(1));
        assert_eq!(s.generation(), 3);
    }

    #[test]
    fn caps_enforced_on_write() {
        let s = FeatureStore::new(SequenceCaps {
            lifelong: 4,
            realtime: 4,
            impression: 4,
        });
        assert!(s.put(1, user(5, 1)).is_err());
        assert!(s.is_empty());
        assert_eq!(s.generation(), 0);
    }

    #[test]
    fn concurrent_readers_see_whole_snapshots() {
        let s = Arc::new(FeatureStore::default());
        s.put(7, user(1, 1)).unwrap();
        std::thread::scope(|sc| {
            let w = s.clone();
            sc.spawn(move || {
                for i in 1..200u32 {
                    w.put(7, user(i as usize, i)).unwrap();
                }
            });
            for _ in 0..2 {
                let r = s.clone();
                sc.spawn(move || {
                    for _ in 0..500 {
                        let u = r.get(7).unwrap();
                        let ts = u.lifelong[0].timestamp;
                        assert_eq!(u.lifelong.len(), ts as usize);
                        assert!(u.lifelong.iter().all(|t| t.timestamp == ts));
                    }
                });
            }
        });
    }
}
