//! Dynamic batch formation on an explicit clock.
//!
//! The former never reads time itself: callers pass `now`, which lets the
//! server drive it with the wall clock and tests with a virtual one.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatcherConfig {
    /// Item (candidate) budget per batch.
    pub max_batch: usize,
    pub max_wait: Duration,
    pub workers: usize,
    /// Requests admitted to the queue before new ones are rejected.
    pub queue_capacity: usize,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        BatcherConfig {
            max_batch: 128,
            max_wait: Duration::from_millis(5),
            workers: 1,
            queue_capacity: 4096,
        }
    }
}

impl BatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(ServeError::BadRequest("max batch must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(ServeError::BadRequest("worker count must be >= 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(ServeError::BadRequest("queue capacity must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Pending<T> {
    pub arrival: Duration,
    pub items: usize,
    pub payload: T,
}

pub struct BatchFormer<T> {
    max_batch: usize,
    max_wait: Duration,
    queue: VecDeque<Pending<T>>,
    queued_items: usize,
}

impl<T> BatchFormer<T> {
    pub fn new(cfg: &BatcherConfig) -> Self {
        BatchFormer {
            max_batch: cfg.max_batch.max(1),
            max_wait: cfg.max_wait,
            queue: VecDeque::with_capacity(cfg.queue_capacity.min(1 << 16)),
            queued_items: 0,
        }
    }

    pub fn push(&mut self, payload: T, items: usize, now: Duration) {
        self.queued_items += items;
        self.queue.push_back(Pending {
            arrival: now,
            items,
            payload,
        });
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn queued_items(&self) -> usize {
        self.queued_items
    }

    /// When the oldest request reaches its maximum wait.
    pub fn deadline(&self) -> Option<Duration> {
        self.queue.front().map(|p| p.arrival + self.max_wait)
    }

    /// A full batch is available or the oldest request has waited `max_wait`.
    pub fn ready(&self, now: Duration) -> bool {
        self.queued_items >= self.max_batch || self.deadline().is_some_and(|d| now >= d)
    }

    /// Moves requests in arrival order into `out` (cleared first) while they
    /// fit the item budget. A request larger than the budget forms a batch
    /// on its own; requests are never split. Returns the batch's item count.
    pub fn take_batch(&mut self, out: &mut Vec<Pending<T>>) -> usize {
        out.clear();
        let mut items = 0;
        while let Some(front) = self.queue.front() {
            if !out.is_empty() && items + front.items > self.max_batch {
                break;
            }
            items += front.items;
            out.extend(self.queue.pop_front());
        }
        self.queued_items -= items;
        items
    }

    pub fn drain(&mut self) -> impl Iterator<Item = Pending<T>> + '_ {
        self.queued_items = 0;
        self.queue.drain(..)
    }
}
