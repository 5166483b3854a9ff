//! Mutable-priority work queue with cancellation.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::model::{CutDelta, NodeId, WorkKey};

/// A unit of extraction work handed to a worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkItem {
    pub key: WorkKey,
    pub priority: f32,
}

/// Pending entries sort first by descending priority, then ascending node, then
/// ascending timestep.
#[derive(Debug, Clone, Copy)]
struct Entry {
    priority: f32,
    key: WorkKey,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then(self.key.node.cmp(&other.key.node))
            .then(self.key.timestep.cmp(&other.key.timestep))
            .then(self.key.spec_version.cmp(&other.key.spec_version))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

/// Outcome of [`WorkQueue::apply_delta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaOutcome {
    Applied,
    /// The delta named an older spec version and was dropped.
    Stale,
    /// The delta named a version the queue has not reached.
    Ahead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueueStats {
    pub pending: u32,
    pub running: u32,
    pub stale_deltas: u64,
}

#[derive(Debug, Default)]
struct Inner {
    version: u32,
    pending: BTreeSet<Entry>,
    priorities: HashMap<WorkKey, f32>,
    /// Popped but not yet finished; the flag says whether the result is still wanted.
    running: HashMap<WorkKey, bool>,
    stale_deltas: u64,
    shutdown: bool,
}

impl Inner {
    fn enqueue(&mut self, key: WorkKey, priority: f32) {
        let priority = if priority.is_nan() { 0.0 } else { priority };
        if let Some(wanted) = self.running.get_mut(&key) {
            *wanted = true;
            return;
        }
        if let Some(old) = self.priorities.insert(key, priority) {
            self.pending.remove(&Entry { priority: old, key });
        }
        self.pending.insert(Entry { priority, key });
    }

    fn reprioritize(&mut self, key: WorkKey, priority: f32) -> bool {
        let priority = if priority.is_nan() { 0.0 } else { priority };
        match self.priorities.get_mut(&key) {
            Some(p) => {
                self.pending.remove(&Entry { priority: *p, key });
                *p = priority;
                self.pending.insert(Entry { priority, key });
                true
            }
            None => false,
        }
    }

    fn cancel(&mut self, key: WorkKey) -> bool {
        if let Some(p) = self.priorities.remove(&key) {
            self.pending.remove(&Entry { priority: p, key });
            return true;
        }
        match self.running.get_mut(&key) {
            Some(wanted) => std::mem::replace(wanted, false),
            None => false,
        }
    }
}

/// Concurrent priority queue shared by one session's reader and workers.
#[derive(Debug, Default)]
pub struct WorkQueue {
    inner: Mutex<Inner>,
    ready: Condvar,
}

impl WorkQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        self.inner.lock().version
    }

    /// Adds a pending item, or updates its priority if already pending. A key
    /// that is running but was cancelled becomes wanted again.
    pub fn enqueue(&self, key: WorkKey, priority: f32) {
        self.inner.lock().enqueue(key, priority);
        self.ready.notify_one();
    }

    /// Changes the priority of a pending item; returns false if it is not pending.
    pub fn reprioritize(&self, key: WorkKey, priority: f32) -> bool {
        self.inner.lock().reprioritize(key, priority)
    }

    /// Drops a pending item or marks a running one as unwanted.
    pub fn cancel(&self, key: WorkKey) -> bool {
        self.inner.lock().cancel(key)
    }

    /// Applies a whole cut delta atomically.
    pub fn apply_delta(&self, version: u32, timestep: u32, delta: &CutDelta) -> DeltaOutcome {
        let mut inner = self.inner.lock();
        match version.cmp(&inner.version) {
            Ordering::Less => {
                inner.stale_deltas += 1;
                return DeltaOutcome::Stale;
            }
            Ordering::Greater => return DeltaOutcome::Ahead,
            Ordering::Equal => {}
        }
        let key = |node: NodeId| WorkKey::new(version, timestep, node);
        for &node in &delta.removed {
            inner.cancel(key(node));
        }
        for &(node, p) in &delta.reprioritized {
            inner.reprioritize(key(node), p);
        }
        for &(node, p) in &delta.added {
            inner.enqueue(key(node), p);
        }
        drop(inner);
        self.ready.notify_all();
        DeltaOutcome::Applied
    }

    /// Cancels everything and moves to `new_version`. Returns the number of
    /// pending items dropped, or `None` if the version does not increase.
    pub fn abort_all(&self, new_version: u32) -> Option<usize> {
        let mut inner = self.inner.lock();
        if new_version <= inner.version {
            return None;
        }
        let dropped = inner.pending.len();
        inner.pending.clear();
        inner.priorities.clear();
        inner.running.values_mut().for_each(|w| *w = false);
        inner.version = new_version;
        Some(dropped)
    }

    /// Takes the highest-priority pending item without blocking.
    pub fn try_pop(&self) -> Option<WorkItem> {
        let mut inner = self.inner.lock();
        Self::take(&mut inner)
    }

    fn take(inner: &mut Inner) -> Option<WorkItem> {
        let entry = inner.pending.pop_first()?;
        inner.priorities.remove(&entry.key);
        inner.running.insert(entry.key, true);
        Some(WorkItem {
            key: entry.key,
            priority: entry.priority,
        })
    }

    /// Blocks until an item is available; `None` once the queue is shut down.
    pub fn pop(&self) -> Option<WorkItem> {
        let mut inner = self.inner.lock();
        loop {
            if inner.shutdown {
                return None;
            }
            if let Some(item) = Self::take(&mut inner) {
                return Some(item);
            }
            self.ready.wait(&mut inner);
        }
    }

    /// Like [`pop`](Self::pop) but gives up after `timeout`.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<WorkItem> {
        let mut inner = self.inner.lock();
        if inner.shutdown {
            return None;
        }
        if let Some(item) = Self::take(&mut inner) {
            return Some(item);
        }
        self.ready.wait_for(&mut inner, timeout);
        if inner.shutdown {
            return None;
        }
        Self::take(&mut inner)
    }

    /// Marks a running item done; returns whether its result is still wanted.
    pub fn finish(&self, key: WorkKey) -> bool {
        let mut inner = self.inner.lock();
        let wanted = inner.running.remove(&key).unwrap_or(false);
        wanted && key.spec_version == inner.version
    }

    /// Whether a running item's result would currently be delivered.
    pub fn is_wanted(&self, key: WorkKey) -> bool {
        let inner = self.inner.lock();
        key.spec_version == inner.version && inner.running.get(&key).copied().unwrap_or(false)
    }

    /// Cancels all work and wakes every blocked consumer.
    pub fn shutdown(&self) {
        let mut inner = self.inner.lock();
        inner.shutdown = true;
        inner.pending.clear();
        inner.priorities.clear();
        inner.running.values_mut().for_each(|w| *w = false);
        drop(inner);
        self.ready.notify_all();
    }

    pub fn is_shutdown(&self) -> bool {
        self.inner.lock().shutdown
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.inner.lock();
        QueueStats {
            pending: inner.pending.len() as u32,
            running: inner.running.len() as u32,
            stale_deltas: inner.stale_deltas,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn key(ix: u16) -> WorkKey {
        WorkKey::new(0, 0, NodeId::new(0, ix, 0, 0))
    }

    fn delta_add(items: &[(u16, f32)]) -> CutDelta {
        CutDelta {
            added: items
                .iter()
                .map(|&(i, p)| (NodeId::new(0, i, 0, 0), p))
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn pops_the_highest_priority() {
        let q = WorkQueue::new();
        q.enqueue(key(1), 2.0);
        q.enqueue(key(2), 5.0);
        assert_eq!(q.try_pop().unwrap().key, key(2));
    }

    #[test]
    fn in_place_update_is_honoured() {
        let q = WorkQueue::new();
        q.enqueue(key(1), 2.0);
        assert!(q.reprioritize(key(1), 9.0));
        q.enqueue(key(2), 5.0);
        assert_eq!(q.try_pop().unwrap().key, key(1));
        assert_eq!(q.stats().pending, 1);
    }

    #[test]
    fn cancelled_items_never_pop() {
        let q = WorkQueue::new();
        q.enqueue(key(1), 1.0);
        assert!(q.cancel(key(1)));
        assert!(q.try_pop().is_none());
    }

    #[test]
    fn ties_break_by_node_then_timestep() {
        let q = WorkQueue::new();
        let n = |l, x| NodeId::new(l, x, 0, 0);
        q.enqueue(WorkKey::new(0, 1, n(0, 3)), 1.0);
        q.enqueue(WorkKey::new(0, 0, n(0, 3)), 1.0);
        q.enqueue(WorkKey::new(0, 0, n(1, 0)), 1.0);
        q.enqueue(WorkKey::new(0, 0, n(0, 2)), 1.0);
        let order: Vec<_> = std::iter::from_fn(|| q.try_pop())
            .map(|i| (i.key.node, i.key.timestep))
            .collect();
        assert_eq!(
            order,
            vec![(n(0, 2), 0), (n(0, 3), 0), (n(0, 3), 1), (n(1, 0), 0)]
        );
    }

    #[test]
    fn abort_clears_pending_and_needs_a_newer_version() {
        let q = WorkQueue::new();
        for i in 0..10 {
            q.enqueue(key(i), i as f32);
        }
        let running = q.try_pop().unwrap();
        assert_eq!(q.abort_all(1), Some(9));
        assert_eq!(q.stats().pending, 0);
        assert_eq!(q.version(), 1);
        assert!(!q.finish(running.key), "old result must be suppressed");
        assert_eq!(q.abort_all(1), None);
        assert_eq!(q.abort_all(0), None);
    }

    #[test]
    fn deltas_check_versions() {
        let q = WorkQueue::new();
        q.abort_all(3).unwrap();
        assert_eq!(
            q.apply_delta(2, 0, &delta_add(&[(1, 1.0)])),
            DeltaOutcome::Stale
        );
        assert_eq!(
            q.apply_delta(4, 0, &delta_add(&[(1, 1.0)])),
            DeltaOutcome::Ahead
        );
        assert_eq!(q.stats().pending, 0);
        assert_eq!(q.stats().stale_deltas, 1);
        assert_eq!(
            q.apply_delta(3, 7, &delta_add(&[(1, 1.0)])),
            DeltaOutcome::Applied
        );
        let item = q.try_pop().unwrap();
        assert_eq!(item.key, WorkKey::new(3, 7, NodeId::new(0, 1, 0, 0)));
    }

    #[test]
    fn removing_a_running_item_suppresses_it_and_readding_revives_it() {
        let q = WorkQueue::new();
        q.enqueue(key(1), 1.0);
        let item = q.try_pop().unwrap();
        assert!(q.cancel(item.key));
        assert!(!q.is_wanted(item.key));
        q.enqueue(item.key, 4.0);
        assert!(
            q.try_pop().is_none(),
            "a running key is never pending twice"
        );
        assert!(q.finish(item.key));
    }

    #[test]
    fn blocking_pop_wakes_on_enqueue_and_shutdown() {
        let q = Arc::new(WorkQueue::new());
        let q2 = q.clone();
        let h = std::thread::spawn(move || (q2.pop(), q2.pop()));
        std::thread::sleep(Duration::from_millis(20));
        q.enqueue(key(5), 1.0);
        std::thread::sleep(Duration::from_millis(20));
        q.shutdown();
        let (a, b) = h.join().unwrap();
        assert_eq!(a.unwrap().key, key(5));
        assert!(b.is_none());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Enqueue(u16, u8),
        Reprioritize(u16, u8),
        Cancel(u16),
        Pop,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u16..24, 0u8..8).prop_map(|(k, p)| Op::Enqueue(k, p)),
            (0u16..24, 0u8..8).prop_map(|(k, p)| Op::Reprioritize(k, p)),
            (0u16..24).prop_map(Op::Cancel),
            Just(Op::Pop),
        ]
    }

    proptest! {
        #[test]
        fn matches_a_sorted_list_oracle(ops in prop::collection::vec(op(), 1..300)) {
            let q = WorkQueue::new();
            let mut oracle: Vec<(u16, f32)> = Vec::new();
            for op in ops {
                match op {
                    Op::Enqueue(k, p) => {
                        let p = p as f32;
                        match oracle.iter_mut().find(|(ok, _)| *ok == k) {
                            Some(e) => e.1 = p,
                            None => oracle.push((k, p)),
                        }
                        q.enqueue(key(k), p);
                    }
                    Op::Reprioritize(k, p) => {
                        let p = p as f32;
                        let expected = oracle.iter_mut().find(|(ok, _)| *ok == k).map(|e| e.1 = p).is_some();
                        prop_assert_eq!(q.reprioritize(key(k), p), expected);
                    }
                    Op::Cancel(k) => {
                        let before = oracle.len();
                        oracle.retain(|(ok, _)| *ok != k);
                        prop_assert_eq!(q.cancel(key(k)), before != oracle.len());
                    }
                    Op::Pop => {
                        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        let expected = if oracle.is_empty() { None } else { Some(oracle.remove(0)) };
                        let got = q.try_pop().map(|i| (i.key.node.ix, i.priority));
                        prop_assert_eq!(got, expected);
                        if let Some((k, _)) = got {
                            prop_assert!(q.finish(key(k)));
                        }
                    }
                }
                prop_assert_eq!(q.stats().pending as usize, oracle.len());
            }
        }
    }
}
