//! Online serving for the sequence ranking model.
//!
//! [`server::Server`] owns the queue, the batcher and the worker pool;
//! [`engine::Engine`] runs a batch; [`http`] exposes it as JSON over HTTP;
//! [`bench`] replays a seeded load against the four ablation configurations.

pub mod alloc;
pub mod arena;
pub mod batcher;
pub mod bench;
pub mod engine;
pub mod error;
pub mod http;
pub mod logger;
pub mod server;
pub mod stats;
pub mod store;

pub use engine::{Ablation, Engine, EngineConfig, ItemScore, RankRequest, RankResponse};
pub use error::{Result, ServeError};
pub use server::Server;
pub use store::FeatureStore;

#[cfg(test)]
#[global_allocator]
static GLOBAL: alloc::CountingAllocator = alloc::CountingAllocator;
