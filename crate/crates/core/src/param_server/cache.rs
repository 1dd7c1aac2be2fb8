//! Client-side LRU cache in front of a [`ShardedStore`].

use std::num::NonZeroUsize;

use lru::LruCache;

use super::{build_updates, check_outcomes, FetchedRows, ShardedStore, WeightBackend, WeightRecord};
use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePolicy {
    /// Every fetch goes to the store; cached copies are only refreshed.
    AlwaysRefresh,
    /// A cached copy is served even if the store has moved on.
    AllowStale,
}

#[derive(Debug)]
pub struct ClientCache {
    entries: LruCache<usize, WeightRecord>,
    policy: CachePolicy,
    hits: u64,
    misses: u64,
}

impl ClientCache {
    pub fn new(capacity: usize, policy: CachePolicy) -> Result<Self> {
        let cap = NonZeroUsize::new(capacity)
            .ok_or_else(|| Error::config("ps.cache_capacity", "must be positive"))?;
        Ok(Self {
            entries: LruCache::new(cap),
            policy,
            hits: 0,
            misses: 0,
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fetch(&mut self, store: &ShardedStore, ids: &[usize]) -> Result<Vec<WeightRecord>> {
        let missing: Vec<usize> = match self.policy {
            CachePolicy::AlwaysRefresh => ids.to_vec(),
            CachePolicy::AllowStale => ids.iter().copied().filter(|id| !self.entries.contains(id)).collect(),
        };
        self.hits += (ids.len() - missing.len()) as u64;
        self.misses += missing.len() as u64;
        for rec in store.fetch(&missing)? {
            self.entries.put(rec.class_id, rec);
        }
        ids.iter()
            .map(|id| {
                self.entries
                    .get(id)
                    .cloned()
                    // ids larger than the capacity can evict entries fetched in this call
                    .map_or_else(|| store.fetch(&[*id]).map(|mut v| v.remove(0)), Ok)
            })
            .collect()
    }

    pub fn invalidate(&mut self, ids: &[usize]) {
        for id in ids {
            self.entries.pop(id);
        }
    }
}

/// A store reached through a [`ClientCache`].
#[derive(Debug)]
pub struct CachedStore<'a> {
    pub store: &'a ShardedStore,
    pub cache: ClientCache,
}

impl<'a> CachedStore<'a> {
    pub fn new(store: &'a ShardedStore, cache: ClientCache) -> Self {
        Self { store, cache }
    }
}

impl WeightBackend for CachedStore<'_> {
    fn num_classes(&self) -> usize {
        self.store.num_classes()
    }

    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn fetch_rows(&mut self, ids: &[usize]) -> Result<FetchedRows> {
        let recs = self.cache.fetch(self.store, ids)?;
        FetchedRows::from_records(recs, self.store.dim())
    }

    fn apply_deltas(&mut self, ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<()> {
        let outcomes = self.store.push_update(&build_updates(ids, deltas, expected)?)?;
        check_outcomes(ids, &outcomes)
    }

    fn export_all(&mut self) -> Result<Matrix> {
        Ok(self.store.to_matrix())
    }
}
