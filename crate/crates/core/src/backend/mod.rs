//! Extraction service: per-session priority queues drained by worker threads,
//! a shared block cache, and TCP and WebSocket front ends.

pub mod cache;
pub mod queue;
pub mod server;
pub mod session;

use std::sync::Arc;
use std::time::Duration;

use crate::preprocess::OctreeStore;

pub use cache::BlockCache;
pub use queue::{DeltaOutcome, QueueStats, WorkItem, WorkQueue};
pub use server::{serve, Server, ServerConfig};
pub use session::{Flow, FrameSink, Session, SessionReport};

/// Per-session settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    /// Extraction threads per session.
    pub workers: usize,
    /// Sleep before each item; lets tests observe in-flight states.
    pub work_delay: Duration,
    /// Minimum spacing of `STATS` frames; they are only sent when changed.
    pub stats_interval: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            work_delay: Duration::ZERO,
            stats_interval: Duration::from_millis(200),
        }
    }
}

/// State shared by all sessions of one server.
#[derive(Debug)]
pub struct Backend {
    pub store: Arc<OctreeStore>,
    pub cache: BlockCache,
    pub config: SessionConfig,
}

impl Backend {
    pub fn new(store: Arc<OctreeStore>, cache_bytes: usize, config: SessionConfig) -> Arc<Self> {
        Arc::new(Self {
            store,
            cache: BlockCache::new(cache_bytes),
            config,
        })
    }
}
