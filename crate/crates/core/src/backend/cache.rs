//! Byte-bounded LRU cache of node payloads.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

use crate::error::Result;
use crate::model::{BlockData, NodeId};

pub type CacheKey = (u32, NodeId);

#[derive(Debug)]
struct Inner {
    entries: LruCache<CacheKey, Arc<BlockData>>,
    bytes: usize,
}

/// Shared between all workers of a server. A capacity of zero disables caching.
#[derive(Debug)]
pub struct BlockCache {
    capacity: usize,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl BlockCache {
    pub fn new(capacity_bytes: usize) -> Self {
        Self {
            capacity: capacity_bytes,
            inner: Mutex::new(Inner {
                entries: LruCache::unbounded(),
                bytes: 0,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident_bytes(&self) -> usize {
        self.inner.lock().bytes
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<BlockData>> {
        let found = self.inner.lock().entries.get(key).cloned();
        match &found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    /// Inserts a payload, evicting least-recently-used entries to stay within
    /// capacity. Payloads larger than the whole cache are not kept.
    pub fn insert(&self, key: CacheKey, block: Arc<BlockData>) {
        let size = block.byte_len();
        if size > self.capacity {
            return;
        }
        let mut inner = self.inner.lock();
        if let Some(old) = inner.entries.pop(&key) {
            inner.bytes -= old.byte_len();
        }
        while inner.bytes + size > self.capacity {
            match inner.entries.pop_lru() {
                Some((_, old)) => inner.bytes -= old.byte_len(),
                None => break,
            }
        }
        inner.bytes += size;
        inner.entries.put(key, block);
    }

    /// Returns the cached payload or loads and caches it. Loading happens
    /// outside the lock, so two workers missing on the same key may both load.
    pub fn get_or_load(
        &self,
        key: CacheKey,
        load: impl FnOnce() -> Result<BlockData>,
    ) -> Result<Arc<BlockData>> {
        if let Some(block) = self.get(&key) {
            return Ok(block);
        }
        let block = Arc::new(load()?);
        self.insert(key, block.clone());
        Ok(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(ix: u16, side: usize) -> BlockData {
        BlockData {
            node: NodeId::new(0, ix, 0, 0),
            timestep: 0,
            side,
            samples: vec![vec![ix as f32; side * side * side]],
        }
    }

    #[test]
    fn second_request_is_a_hit() {
        let cache = BlockCache::new(1 << 20);
        let key = (0, NodeId::new(0, 1, 0, 0));
        let mut loads = 0;
        for _ in 0..2 {
            cache
                .get_or_load(key, || {
                    loads += 1;
                    Ok(block(1, 3))
                })
                .unwrap();
        }
        assert_eq!(loads, 1);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
    }

    #[test]
    fn evicts_least_recently_used() {
        let one = block(0, 2).byte_len();
        let cache = BlockCache::new(2 * one);
        let k = |i: u16| (0, NodeId::new(0, i, 0, 0));
        cache.insert(k(0), Arc::new(block(0, 2)));
        cache.insert(k(1), Arc::new(block(1, 2)));
        assert!(cache.get(&k(0)).is_some());
        cache.insert(k(2), Arc::new(block(2, 2)));
        assert!(cache.get(&k(1)).is_none());
        assert!(cache.get(&k(0)).is_some());
        assert!(cache.get(&k(2)).is_some());
    }

    #[test]
    fn zero_capacity_keeps_nothing() {
        let cache = BlockCache::new(0);
        cache.insert((0, NodeId::default()), Arc::new(block(0, 2)));
        assert!(cache.is_empty());
    }

    proptest! {
        #[test]
        fn resident_bytes_stay_within_capacity(
            capacity in 0usize..2000,
            ops in prop::collection::vec((0u16..12, 1usize..5), 1..80),
        ) {
            let cache = BlockCache::new(capacity);
            for (ix, side) in ops {
                let key = (0, NodeId::new(0, ix, 0, 0));
                let b = cache.get_or_load(key, || Ok(block(ix, side))).unwrap();
                prop_assert_eq!(b.samples[0][0], ix as f32);
                prop_assert!(cache.resident_bytes() <= capacity);
            }
        }
    }
}
