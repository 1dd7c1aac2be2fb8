//! Sharded, versioned class-weight store.
//!
//! All K class weights live in the store; a training client fetches only the rows it
//! sampled for a mini-batch and pushes weight deltas back. Classes are assigned to
//! shards by `class_id mod num_shards` and each shard has its own lock, so operations
//! on different shards never wait on each other.
//!
//! Updates are additive deltas. A push either carries the version the client fetched
//! (rejected as stale if the record moved on) or is blind (always applied). Each
//! applied delta bumps the record version by exactly one.

mod cache;
pub mod net;
pub mod protocol;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

pub use cache::{CachePolicy, CachedStore, ClientCache};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::math::Matrix;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"DSPS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardMap {
    num_shards: usize,
}

impl ShardMap {
    pub fn new(num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::config("ps.shards", "need at least one shard"));
        }
        Ok(Self { num_shards })
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    #[inline]
    pub fn shard_of(&self, class_id: usize) -> usize {
        class_id % self.num_shards
    }

    #[inline]
    fn slot_of(&self, class_id: usize) -> usize {
        class_id / self.num_shards
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub class_id: usize,
    pub weight: Vec<f64>,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub class_id: usize,
    pub delta: Vec<f64>,
    /// `None` applies the delta unconditionally.
    pub expected_version: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Applied { version: u64 },
    StaleRejected { current: u64 },
}

#[derive(Clone, Debug)]
struct Slot {
    weight: Vec<f64>,
    version: u64,
}

/// Per-operation counters, reported by the socket server.
#[derive(Debug, Default)]
pub struct OpCounters {
    pub fetch_calls: AtomicU64,
    pub records_fetched: AtomicU64,
    pub push_calls: AtomicU64,
    pub updates_applied: AtomicU64,
    pub updates_stale: AtomicU64,
}

impl OpCounters {
    pub fn summary(&self) -> String {
        format!(
            "fetch_calls={} records_fetched={} push_calls={} applied={} stale={}",
            self.fetch_calls.load(Ordering::Relaxed),
            self.records_fetched.load(Ordering::Relaxed),
            self.push_calls.load(Ordering::Relaxed),
            self.updates_applied.load(Ordering::Relaxed),
            self.updates_stale.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug)]
pub struct ShardedStore {
    map: ShardMap,
    num_classes: usize,
    dim: usize,
    shards: Vec<RwLock<Vec<Slot>>>,
    counters: OpCounters,
}

impl ShardedStore {
    /// Store holding the rows of `init` at version 0.
    pub fn new(init: &Matrix, num_shards: usize) -> Result<Self> {
        let slots = init
            .row_iter()
            .map(|r| Slot {
                weight: r.to_vec(),
                version: 0,
            })
            .collect();
        Self::from_slots(slots, init.rows(), init.cols(), num_shards)
    }

    fn from_slots(slots: Vec<Slot>, num_classes: usize, dim: usize, num_shards: usize) -> Result<Self> {
        let map = ShardMap::new(num_shards)?;
        let mut shards: Vec<Vec<Slot>> = (0..num_shards).map(|_| Vec::new()).collect();
        for (class_id, slot) in slots.into_iter().enumerate() {
            shards[map.shard_of(class_id)].push(slot);
        }
        Ok(Self {
            map,
            num_classes,
            dim,
            shards: shards.into_iter().map(RwLock::new).collect(),
            counters: OpCounters::default(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shard_map(&self) -> ShardMap {
        self.map
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.num_classes {
            Err(Error::UnknownClass(id))
        } else {
            Ok(())
        }
    }

    /// Current vector and version for each id, in request order.
    pub fn fetch(&self, ids: &[usize]) -> Result<Vec<WeightRecord>> {
        for &id in ids {
            self.check_id(id)?;
        }
        self.counters.fetch_calls.fetch_add(1, Ordering::Relaxed);
        self.counters
            .records_fetched
            .fetch_add(ids.len() as u64, Ordering::Relaxed);
        Ok(ids
            .iter()
            .map(|&id| {
                let shard = self.shards[self.map.shard_of(id)].read().unwrap();
                let slot = &shard[self.map.slot_of(id)];
                WeightRecord {
                    class_id: id,
                    weight: slot.weight.clone(),
                    version: slot.version,
                }
            })
            .collect())
    }

    /// Applies updates in order. Ids and dimensions are validated before anything is applied.
    pub fn push_update(&self, updates: &[Update]) -> Result<Vec<PushOutcome>> {
        for u in updates {
            self.check_id(u.class_id)?;
            if u.delta.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    got: u.delta.len(),
                });
            }
            if u.delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "pushed delta" });
            }
        }
        self.counters.push_calls.fetch_add(1, Ordering::Relaxed);
        let outcomes = updates
            .iter()
            .map(|u| {
                let mut shard = self.shards[self.map.shard_of(u.class_id)].write().unwrap();
                let slot = &mut shard[self.map.slot_of(u.class_id)];
                match u.expected_version {
                    Some(v) if v != slot.version => {
                        self.counters.updates_stale.fetch_add(1, Ordering::Relaxed);
                        PushOutcome::StaleRejected { current: slot.version }
                    }
                    _ => {
                        for (w, d) in slot.weight.iter_mut().zip(&u.delta) {
                            *w += d;
                        }
                        slot.version += 1;
                        self.counters.updates_applied.fetch_add(1, Ordering::Relaxed);
                        PushOutcome::Applied { version: slot.version }
                    }
                }
            })
            .collect();
        Ok(outcomes)
    }

    /// All weights as a K x n matrix.
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.num_classes, self.dim);
        for (s, shard) in self.shards.iter().enumerate() {
            let shard = shard.read().unwrap();
            for (slot_idx, slot) in shard.iter().enumerate() {
                let id = slot_idx * self.map.num_shards() + s;
                m.row_mut(id).copy_from_slice(&slot.weight);
            }
        }
        m
    }

    pub fn versions(&self) -> Vec<u64> {
        let mut v = vec![0; self.num_classes];
        for (s, shard) in self.shards.iter().enumerate() {
            for (slot_idx, slot) in shard.read().unwrap().iter().enumerate() {
                v[slot_idx * self.map.num_shards() + s] = slot.version;
            }
        }
        v
    }

    /// `DSPS1` snapshot bytes: magic, K, n, then K records of (class_id, version, n f64), all LE.
    pub fn encode_snapshot(&self) -> Vec<u8> {
        let ids: Vec<usize> = (0..self.num_classes).collect();
        let records = self.fetch_quiet(&ids);
        let mut buf = Vec::with_capacity(snapshot_len(self.num_classes, self.dim));
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for r in records {
            buf.extend_from_slice(&(r.class_id as u64).to_le_bytes());
            buf.extend_from_slice(&r.version.to_le_bytes());
            for v in &r.weight {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    fn fetch_quiet(&self, ids: &[usize]) -> Vec<WeightRecord> {
        ids.iter()
            .map(|&id| {
                let shard = self.shards[self.map.shard_of(id)].read().unwrap();
                let slot = &shard[self.map.slot_of(id)];
                WeightRecord {
                    class_id: id,
                    weight: slot.weight.clone(),
                    version: slot.version,
                }
            })
            .collect()
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_snapshot())
    }

    /// Store holding `weights` at the given per-class versions.
    pub fn with_versions(weights: &Matrix, versions: &[u64], num_shards: usize) -> Result<Self> {
        if versions.len() != weights.rows() {
            return Err(Error::Shape {
                context: "ShardedStore::with_versions",
                expected: format!("{} versions", weights.rows()),
                got: versions.len().to_string(),
            });
        }
        let slots = weights
            .row_iter()
            .zip(versions)
            .map(|(r, &version)| Slot { weight: r.to_vec(), version })
            .collect();
        Self::from_slots(slots, weights.rows(), weights.cols(), num_shards)
    }

    pub fn load(path: &Path, num_shards: usize) -> Result<Self> {
        let (k, n, slots) = decode_snapshot(&fs::read(path)?)?;
        Self::from_slots(slots, k, n, num_shards)
    }

    /// Replaces the contents with a snapshot of the same shape. On any error the store is unchanged.
    pub fn restore(&self, path: &Path) -> Result<()> {
        let (k, n, slots) = decode_snapshot(&fs::read(path)?)?;
        if k != self.num_classes || n != self.dim {
            return Err(Error::Format(format!(
                "snapshot is {k}x{n}, store is {}x{}",
                self.num_classes, self.dim
            )));
        }
        let mut guards: Vec<_> = self.shards.iter().map(|s| s.write().unwrap()).collect();
        for (class_id, slot) in slots.into_iter().enumerate() {
            guards[self.map.shard_of(class_id)][self.map.slot_of(class_id)] = slot;
        }
        Ok(())
    }
}

/// Size in bytes of a `DSPS1` snapshot.
pub fn snapshot_len(num_classes: usize, dim: usize) -> usize {
    SNAPSHOT_MAGIC.len() + 16 + num_classes * (16 + 8 * dim)
}

fn decode_snapshot(bytes: &[u8]) -> Result<(usize, usize, Vec<Slot>)> {
    if bytes.len() < 21 || &bytes[..5] != SNAPSHOT_MAGIC {
        return Err(Error::Format("missing DSPS1 header".into()));
    }
    let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let k = u64_at(5) as usize;
    let n = u64_at(13) as usize;
    let expected = k
        .checked_mul(n)
        .and_then(|kn| kn.checked_mul(8))
        .and_then(|b| b.checked_add(k.checked_mul(16)?))
        .and_then(|b| b.checked_add(21))
        .ok_or_else(|| Error::Format("snapshot dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "snapshot is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut slots: Vec<Option<Slot>> = vec![None; k];
    let rec = 16 + 8 * n;
    for r in 0..k {
        let off = 21 + r * rec;
        let id = u64_at(off) as usize;
        let version = u64_at(off + 8);
        if id >= k || slots[id].is_some() {
            return Err(Error::Format(format!("bad or duplicate class id {id} in record {r}")));
        }
        let weight: Vec<f64> = bytes[off + 16..off + rec]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite weight for class {id}")));
        }
        slots[id] = Some(Slot { weight, version });
    }
    Ok((k, n, slots.into_iter().map(Option::unwrap).collect()))
}

/// Rows fetched for one step together with their versions.
#[derive(Clone, Debug, PartialEq)]
pub struct FetchedRows {
    pub weights: Matrix,
    pub versions: Vec<u64>,
}

impl FetchedRows {
    fn from_records(records: Vec<WeightRecord>, dim: usize) -> Result<Self> {
        let versions = records.iter().map(|r| r.version).collect();
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in &records {
            data.extend_from_slice(&r.weight);
        }
        Ok(Self {
            weights: Matrix::new(records.len(), dim, data)?,
            versions,
        })
    }
}

/// Where a training loop reads and writes class weights.
///
/// The in-memory [`DenseWeights`] is the reference path; [`ShardedStore`] (directly,
/// through a [`CachedStore`], or over the socket with [`net::RemoteStore`]) must give the
/// same results.
pub trait WeightBackend {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn fetch_rows(&mut self, ids: &[usize]) -> Result<FetchedRows>;
    /// Adds `deltas` row-wise. With `expected` versions, a stale record is an error.
    fn apply_deltas(&mut self, ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<()>;
    fn export_all(&mut self) -> Result<Matrix>;
}

pub(crate) fn build_updates(ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<Vec<Update>> {
    if deltas.rows() != ids.len() || expected.is_some_and(|e| e.len() != ids.len()) {
        return Err(Error::Shape {
            context: "apply_deltas",
            expected: format!("{} rows", ids.len()),
            got: format!("{} rows", deltas.rows()),
        });
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, &class_id)| Update {
            class_id,
            delta: deltas.row(i).to_vec(),
            expected_version: expected.map(|e| e[i]),
        })
        .collect())
}

pub(crate) fn check_outcomes(ids: &[usize], outcomes: &[PushOutcome]) -> Result<()> {
    for (&id, o) in ids.iter().zip(outcomes) {
        if let PushOutcome::StaleRejected { current } = o {
            return Err(Error::Protocol(format!(
                "update for class {id} rejected as stale (server version {current})"
            )));
        }
    }
    Ok(())
}

impl WeightBackend for &ShardedStore {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fetch_rows(&mut self, ids: &[usize]) -> Result<FetchedRows> {
        FetchedRows::from_records(self.fetch(ids)?, self.dim)
    }

    fn apply_deltas(&mut self, ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<()> {
        let outcomes = self.push_update(&build_updates(ids, deltas, expected)?)?;
        check_outcomes(ids, &outcomes)
    }

    fn export_all(&mut self) -> Result<Matrix> {
        Ok(self.to_matrix())
    }
}

/// Plain in-memory weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    pub weights: Matrix,
    versions: Vec<u64>,
}

impl DenseWeights {
    pub fn new(weights: Matrix) -> Self {
        let versions = vec![0; weights.rows()];
        Self { weights, versions }
    }

    pub fn versions(&self) -> &[u64] {
        &self.versions
    }
}

impl WeightBackend for DenseWeights {
    fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn fetch_rows(&mut self, ids: &[usize]) -> Result<FetchedRows> {
        let weights = self.weights.gather_rows(ids)?;
        let versions = ids.iter().map(|&i| self.versions[i]).collect();
        Ok(FetchedRows { weights, versions })
    }

    fn apply_deltas(&mut self, ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<()> {
        let updates = build_updates(ids, deltas, expected)?;
        for u in &updates {
            if u.class_id >= self.weights.rows() {
                return Err(Error::UnknownClass(u.class_id));
            }
            if u.delta.len() != self.weights.cols() {
                return Err(Error::Dimension {
                    expected: self.weights.cols(),
                    got: u.delta.len(),
                });
            }
        }
        for u in updates {
            if let Some(v) = u.expected_version {
                if v != self.versions[u.class_id] {
                    return Err(Error::Protocol(format!("stale update for class {}", u.class_id)));
                }
            }
            for (w, d) in self.weights.row_mut(u.class_id).iter_mut().zip(&u.delta) {
                *w += d;
            }
            self.versions[u.class_id] += 1;
        }
        Ok(())
    }

    fn export_all(&mut self) -> Result<Matrix> {
        Ok(self.weights.clone())
    }
}
