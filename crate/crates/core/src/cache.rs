//! Bounded rolling buffer of captured graphs, keyed by sequence length.
//!
//! Eviction removes the entry with the smallest `(use_count, insert_seq)`
//! pair, i.e. the least-used graph with ties going to the oldest insertion.
//! [`EvictionPolicy::LeastRecent`] swaps use counts for last-use ticks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::graph::ExecGraph;

pub const DEFAULT_CAPACITY: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvictionPolicy {
    #[default]
    LeastUsed,
    LeastRecent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub size: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    graph: Arc<ExecGraph>,
    use_count: u64,
    insert_seq: u64,
    last_use: u64,
    uses_since_release: u64,
    inserted_in_session: bool,
}

#[derive(Debug)]
struct Inner {
    capacity: usize,
    policy: EvictionPolicy,
    entries: HashMap<usize, Entry>,
    seq: u64,
    in_session: bool,
    stats: CacheStats,
}

impl Inner {
    fn victim(&self) -> Option<usize> {
        let rank = |e: &Entry| match self.policy {
            EvictionPolicy::LeastUsed => (e.use_count, e.insert_seq),
            EvictionPolicy::LeastRecent => (e.last_use, e.insert_seq),
        };
        self.entries
            .iter()
            .min_by_key(|(_, e)| rank(e))
            .map(|(k, _)| *k)
    }
}

/// Thread-safe: every operation applies atomically under one lock.
#[derive(Debug)]
pub struct GraphCache {
    inner: Mutex<Inner>,
}

impl GraphCache {
    pub fn new(capacity: usize) -> Result<Self> {
        Self::with_policy(capacity, EvictionPolicy::LeastUsed)
    }

    pub fn with_policy(capacity: usize, policy: EvictionPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig(
                "graph cache capacity must be positive".into(),
            ));
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                capacity,
                policy,
                entries: HashMap::new(),
                seq: 0,
                in_session: false,
                stats: CacheStats::default(),
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("graph cache lock poisoned")
    }

    pub fn capacity(&self) -> usize {
        self.lock().capacity
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, len: usize) -> bool {
        self.lock().entries.contains_key(&len)
    }

    pub fn use_count(&self, len: usize) -> Option<u64> {
        self.lock().entries.get(&len).map(|e| e.use_count)
    }

    /// Hit: returns the graph and bumps its use count. Miss: no side effects
    /// beyond the miss counter.
    pub fn lookup(&self, len: usize) -> Option<Arc<ExecGraph>> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        inner.seq += 1;
        let tick = inner.seq;
        match inner.entries.get_mut(&len) {
            Some(e) => {
                e.use_count += 1;
                e.uses_since_release += 1;
                e.last_use = tick;
                let g = Arc::clone(&e.graph);
                inner.stats.hits += 1;
                Some(g)
            }
            None => {
                inner.stats.misses += 1;
                None
            }
        }
    }

    /// Stores `graph` under `len` with a zero use count. Re-inserting an
    /// existing key replaces it in place. Returns the evicted key, if any.
    pub fn insert(&self, len: usize, graph: Arc<ExecGraph>) -> Result<Option<usize>> {
        if graph.len() != len {
            return Err(Error::KeyMismatch {
                key: len,
                graph_len: graph.len(),
            });
        }
        let mut inner = self.lock();
        inner.seq += 1;
        let seq = inner.seq;
        let mut evicted = None;
        if !inner.entries.contains_key(&len) && inner.entries.len() == inner.capacity {
            let victim = inner.victim().expect("full cache has a victim");
            inner.entries.remove(&victim);
            inner.stats.evictions += 1;
            evicted = Some(victim);
        }
        let in_session = inner.in_session;
        inner.entries.insert(
            len,
            Entry {
                graph,
                use_count: 0,
                insert_seq: seq,
                last_use: seq,
                uses_since_release: 0,
                inserted_in_session: in_session,
            },
        );
        inner.stats.inserts += 1;
        Ok(evicted)
    }

    /// Captures and inserts a graph for every length in `lo..=hi`.
    pub fn precapture_warmup(
        &self,
        lo: usize,
        hi: usize,
        mut capture: impl FnMut(usize) -> Result<ExecGraph>,
    ) -> Result<usize> {
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("warm-up range [{lo}, {hi}]")));
        }
        let requested = hi - lo + 1;
        let capacity = self.capacity();
        if requested > capacity {
            return Err(Error::WarmupExceedsCapacity {
                requested,
                capacity,
            });
        }
        for len in lo..=hi {
            let g = capture(len)?;
            self.insert(len, Arc::new(g))?;
        }
        Ok(requested)
    }

    /// Marks the start of a decode session. Graphs inserted while a session
    /// is open survive the next [`GraphCache::release_inactive`].
    pub fn begin_session(&self) {
        self.lock().in_session = true;
    }

    /// Drops entries not looked up since the previous release, except those
    /// freshly captured during the session that just ended. Closes the
    /// session and returns the number of entries dropped.
    pub fn release_inactive(&self) -> usize {
        let mut inner = self.lock();
        let before = inner.entries.len();
        inner
            .entries
            .retain(|_, e| e.uses_since_release > 0 || e.inserted_in_session);
        for e in inner.entries.values_mut() {
            e.uses_since_release = 0;
            e.inserted_in_session = false;
        }
        inner.in_session = false;
        before - inner.entries.len()
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.lock();
        CacheStats {
            size: inner.entries.len(),
            ..inner.stats
        }
    }

    /// Cached lengths in ascending order.
    pub fn keys(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.lock().entries.keys().copied().collect();
        k.sort_unstable();
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CaptureEngine;
    use crate::kernels::{KernelInvocation, StaticOp};
    use crate::tensor::BufferStore;

    /// Builds trivial one-kernel graphs for arbitrary lengths.
    pub(crate) struct GraphFactory {
        store: BufferStore,
        engine: CaptureEngine,
    }

    impl GraphFactory {
        pub(crate) fn new() -> Self {
            let mut store = BufferStore::new();
            store.alloc(&[1, 1]);
            let engine = CaptureEngine::new(store.ids().iter().copied());
            Self { store, engine }
        }

        pub(crate) fn graph(&mut self, len: usize) -> ExecGraph {
            let id = self.store.ids()[0];
            let inv =
                KernelInvocation::bind(&self.store, StaticOp::ResidualAdd, vec![id, id], vec![id])
                    .unwrap();
            self.engine.capture_plan(len, vec![inv]).unwrap()
        }
    }

    fn filled(capacity: usize, keys: &[usize], f: &mut GraphFactory) -> GraphCache {
        let c = GraphCache::new(capacity).unwrap();
        for &k in keys {
            c.insert(k, Arc::new(f.graph(k))).unwrap();
        }
        c
    }

    #[test]
    fn lookup_counts_uses() {
        let mut f = GraphFactory::new();
        let c = GraphCache::new(4).unwrap();
        assert!(c.lookup(5).is_none());
        assert_eq!(c.stats().misses, 1);
        c.insert(5, Arc::new(f.graph(5))).unwrap();
        assert_eq!(c.lookup(5).unwrap().len(), 5);
        assert_eq!(c.use_count(5), Some(1));
        c.lookup(5);
        assert_eq!(c.use_count(5), Some(2));
    }

    #[test]
    fn evicts_least_used() {
        let mut f = GraphFactory::new();
        let c = filled(2, &[1, 2], &mut f);
        c.lookup(1);
        assert_eq!(c.insert(3, Arc::new(f.graph(3))).unwrap(), Some(2));
        assert_eq!(c.keys(), vec![1, 3]);
    }

    #[test]
    fn ties_evict_oldest() {
        let mut f = GraphFactory::new();
        let c = filled(2, &[1, 2], &mut f);
        assert_eq!(c.insert(3, Arc::new(f.graph(3))).unwrap(), Some(1));
    }

    #[test]
    fn reinsert_replaces_in_place() {
        let mut f = GraphFactory::new();
        let c = filled(2, &[1, 2], &mut f);
        c.lookup(1);
        assert_eq!(c.insert(1, Arc::new(f.graph(1))).unwrap(), None);
        assert_eq!(c.use_count(1), Some(0));
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn key_mismatch() {
        let mut f = GraphFactory::new();
        let c = GraphCache::new(2).unwrap();
        assert!(matches!(
            c.insert(4, Arc::new(f.graph(5))),
            Err(Error::KeyMismatch {
                key: 4,
                graph_len: 5
            })
        ));
    }

    #[test]
    fn lru_policy_uses_recency() {
        let mut f = GraphFactory::new();
        let c = GraphCache::with_policy(2, EvictionPolicy::LeastRecent).unwrap();
        c.insert(1, Arc::new(f.graph(1))).unwrap();
        c.insert(2, Arc::new(f.graph(2))).unwrap();
        for _ in 0..3 {
            c.lookup(1);
        }
        c.lookup(2);
        // 1 is used more but 2 more recently
        assert_eq!(c.insert(3, Arc::new(f.graph(3))).unwrap(), Some(1));
    }

    #[test]
    fn warmup() {
        let mut f = GraphFactory::new();
        let c = GraphCache::new(600).unwrap();
        assert_eq!(c.precapture_warmup(1, 50, |l| Ok(f.graph(l))).unwrap(), 50);
        assert_eq!(c.len(), 50);
        assert!((1..=50).all(|l| c.lookup(l).is_some()));

        let c = GraphCache::new(600).unwrap();
        assert_eq!(c.precapture_warmup(1, 1, |l| Ok(f.graph(l))).unwrap(), 1);

        let c = GraphCache::new(50).unwrap();
        assert!(matches!(
            c.precapture_warmup(1, 100, |l| Ok(f.graph(l))),
            Err(Error::WarmupExceedsCapacity {
                requested: 100,
                capacity: 50
            })
        ));
    }

    #[test]
    fn release_inactive_rules() {
        let mut f = GraphFactory::new();
        assert_eq!(GraphCache::new(3).unwrap().release_inactive(), 0);

        let c = GraphCache::new(600).unwrap();
        c.precapture_warmup(1, 50, |l| Ok(f.graph(l))).unwrap();
        assert_eq!(c.release_inactive(), 50);

        let c = GraphCache::new(600).unwrap();
        c.precapture_warmup(1, 50, |l| Ok(f.graph(l))).unwrap();
        c.begin_session();
        for l in 10..=50 {
            c.lookup(l);
        }
        c.insert(51, Arc::new(f.graph(51))).unwrap();
        assert_eq!(c.release_inactive(), 9);
        assert_eq!(c.keys(), (10..=51).collect::<Vec<_>>());
    }
}
