//! Aggregating hash containers with deferred, parallel reduction.
//!
//! Inserts land in an append-only buffer. A full buffer is shared with a small
//! pool of reduction threads; thread `i` folds the `i`-th slice into its own
//! local table, so no table is ever touched by two threads. Taking a snapshot
//! drains the local tables into the global one. All aggregates are
//! commutative, so the result does not depend on how inserts were split.

use std::hash::Hash;
use std::ops::Range;
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rustc_hash::FxHashMap;
use thiserror::Error;

pub const DEFAULT_BUFFER_CAPACITY: usize = 1 << 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HtError {
    #[error("cannot merge a {0:?} container into a {1:?} container")]
    FlavorMismatch(Flavor, Flavor),
}

/// How values inserted under the same key are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Remembers the value while every insert agrees.
    Constant,
    /// Number of inserts; values are ignored.
    Count,
    /// Wrapping sum.
    Sum,
    Min,
    Max,
    /// Distinct values, keeping at most `limit` (the smallest) and a
    /// saturation flag.
    Set { limit: Option<usize> },
}

/// Distinct values in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BoundedSet {
    pub values: Vec<u64>,
    pub saturated: bool,
}

impl BoundedSet {
    fn insert(&mut self, v: u64, limit: Option<usize>) {
        match self.values.binary_search(&v) {
            Ok(_) => {}
            Err(pos) => match limit {
                Some(l) if self.values.len() >= l => {
                    self.saturated = true;
                    if pos < self.values.len() {
                        self.values.insert(pos, v);
                        self.values.pop();
                    }
                }
                _ => self.values.insert(pos, v),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Aggregate {
    Constant { value: u64, constant: bool },
    Count(u64),
    Sum(u64),
    Min(u64),
    Max(u64),
    Set(BoundedSet),
}

impl Aggregate {
    fn first(flavor: Flavor, v: u64) -> Self {
        match flavor {
            Flavor::Constant => Aggregate::Constant {
                value: v,
                constant: true,
            },
            Flavor::Count => Aggregate::Count(1),
            Flavor::Sum => Aggregate::Sum(v),
            Flavor::Min => Aggregate::Min(v),
            Flavor::Max => Aggregate::Max(v),
            Flavor::Set { limit } => {
                let mut s = BoundedSet::default();
                s.insert(v, limit);
                Aggregate::Set(s)
            }
        }
    }

    fn fold(&mut self, flavor: Flavor, v: u64) {
        match self {
            Aggregate::Constant { value, constant } => {
                if *constant && *value != v {
                    *constant = false;
                    *value = 0;
                }
            }
            Aggregate::Count(c) => *c += 1,
            Aggregate::Sum(s) => *s = s.wrapping_add(v),
            Aggregate::Min(m) => *m = (*m).min(v),
            Aggregate::Max(m) => *m = (*m).max(v),
            Aggregate::Set(s) => {
                let Flavor::Set { limit } = flavor else { unreachable!() };
                s.insert(v, limit);
            }
        }
    }

    fn combine(&mut self, flavor: Flavor, other: Aggregate) {
        match (self, other) {
            (
                Aggregate::Constant { value, constant },
                Aggregate::Constant {
                    value: v2,
                    constant: c2,
                },
            ) => {
                if !(*constant && c2 && *value == v2) {
                    *constant = false;
                    *value = 0;
                }
            }
            (Aggregate::Count(a), Aggregate::Count(b)) => *a += b,
            (Aggregate::Sum(a), Aggregate::Sum(b)) => *a = a.wrapping_add(b),
            (Aggregate::Min(a), Aggregate::Min(b)) => *a = (*a).min(b),
            (Aggregate::Max(a), Aggregate::Max(b)) => *a = (*a).max(b),
            (Aggregate::Set(a), Aggregate::Set(b)) => {
                let Flavor::Set { limit } = flavor else { unreachable!() };
                a.saturated |= b.saturated;
                for v in b.values {
                    a.insert(v, limit);
                }
            }
            _ => unreachable!("aggregates of one container share a flavor"),
        }
    }

    /// Scalar value for the numeric flavors.
    pub fn scalar(&self) -> Option<u64> {
        match *self {
            Aggregate::Constant { value, .. }
            | Aggregate::Count(value)
            | Aggregate::Sum(value)
            | Aggregate::Min(value)
            | Aggregate::Max(value) => Some(value),
            Aggregate::Set(_) => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Aggregate::Constant { constant: true, .. })
    }
}

type Table<K> = FxHashMap<K, Aggregate>;

fn fold_into<K: Hash + Eq + Copy>(table: &mut Table<K>, flavor: Flavor, entries: &[(K, u64)]) {
    for &(k, v) in entries {
        match table.get_mut(&k) {
            Some(a) => a.fold(flavor, v),
            None => {
                table.insert(k, Aggregate::first(flavor, v));
            }
        }
    }
}

fn combine_into<K: Hash + Eq>(table: &mut Table<K>, flavor: Flavor, other: Table<K>) {
    if table.is_empty() {
        *table = other;
        return;
    }
    for (k, a) in other {
        match table.get_mut(&k) {
            Some(mine) => mine.combine(flavor, a),
            None => {
                table.insert(k, a);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HtConfig {
    /// Entries buffered before a reduction round.
    pub buffer_capacity: usize,
    /// Reduction threads, spawned on the first full buffer.
    pub reducers: usize,
}

impl Default for HtConfig {
    fn default() -> Self {
        HtConfig::for_workers(1)
    }
}

impl HtConfig {
    /// Splits the machine's parallelism among `backend_workers` owners.
    pub fn for_workers(backend_workers: usize) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        HtConfig {
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            reducers: (cores / backend_workers.max(1)).max(1),
        }
    }
}

enum Job<K> {
    Reduce(Arc<Vec<(K, u64)>>, Range<usize>),
    Drain(Sender<Table<K>>),
}

struct Pool<K> {
    senders: Vec<SyncSender<Job<K>>>,
    handles: Vec<JoinHandle<()>>,
    returned: Receiver<Arc<Vec<(K, u64)>>>,
}

impl<K: Copy + Hash + Eq + Send + Sync + 'static> Pool<K> {
    fn spawn(n: usize, flavor: Flavor) -> Self {
        let (ret_tx, returned) = mpsc::channel();
        let mut senders = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for i in 0..n {
            let (tx, rx) = mpsc::sync_channel::<Job<K>>(2);
            let ret_tx = ret_tx.clone();
            let h = std::thread::Builder::new()
                .name(format!("ht-reduce-{i}"))
                .spawn(move || {
                    let mut local: Table<K> = FxHashMap::default();
                    for job in rx {
                        match job {
                            Job::Reduce(buf, range) => {
                                fold_into(&mut local, flavor, &buf[range]);
                                let _ = ret_tx.send(buf);
                            }
                            Job::Drain(reply) => {
                                let _ = reply.send(std::mem::take(&mut local));
                            }
                        }
                    }
                })
                .expect("spawn reduction thread");
            senders.push(tx);
            handles.push(h);
        }
        Pool {
            senders,
            handles,
            returned,
        }
    }
}

impl<K> Drop for Pool<K> {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Map from keys to aggregates of one [`Flavor`].
pub struct HtMap<K: Copy + Hash + Eq + Send + Sync + 'static> {
    flavor: Flavor,
    config: HtConfig,
    buffer: Vec<(K, u64)>,
    global: Table<K>,
    pool: Option<Pool<K>>,
    spare: Vec<Vec<(K, u64)>>,
}

impl<K: Copy + Hash + Eq + Ord + Send + Sync + 'static> HtMap<K> {
    pub fn new(flavor: Flavor) -> Self {
        Self::with_config(flavor, HtConfig::default())
    }

    pub fn with_config(flavor: Flavor, config: HtConfig) -> Self {
        let config = HtConfig {
            buffer_capacity: config.buffer_capacity.max(1),
            reducers: config.reducers.max(1),
        };
        HtMap {
            flavor,
            config,
            buffer: Vec::new(),
            global: FxHashMap::default(),
            pool: None,
            spare: Vec::new(),
        }
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    #[inline]
    pub fn insert(&mut self, key: K, value: u64) {
        if self.buffer.capacity() == 0 {
            self.buffer.reserve_exact(self.config.buffer_capacity);
        }
        self.buffer.push((key, value));
        if self.buffer.len() >= self.config.buffer_capacity {
            self.dispatch();
        }
    }

    fn dispatch(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        if self.pool.is_none() && self.buffer.len() < self.config.buffer_capacity {
            fold_into(&mut self.global, self.flavor, &self.buffer);
            self.buffer.clear();
            return;
        }
        let flavor = self.flavor;
        let reducers = self.config.reducers;
        let pool = self.pool.get_or_insert_with(|| Pool::spawn(reducers, flavor));
        while let Ok(buf) = pool.returned.try_recv() {
            if let Ok(mut v) = Arc::try_unwrap(buf) {
                v.clear();
                self.spare.push(v);
            }
        }
        let next = self
            .spare
            .pop()
            .unwrap_or_else(|| Vec::with_capacity(self.config.buffer_capacity));
        let full = Arc::new(std::mem::replace(&mut self.buffer, next));
        let n = full.len();
        let r = pool.senders.len();
        for (i, tx) in pool.senders.iter().enumerate() {
            let range = (n * i / r)..(n * (i + 1) / r);
            tx.send(Job::Reduce(full.clone(), range)).expect("reduction thread alive");
        }
    }

    /// Folds everything buffered or held by reducers into the global table.
    fn flush(&mut self) {
        self.dispatch();
        if let Some(pool) = &self.pool {
            let (tx, rx) = mpsc::channel();
            for s in &pool.senders {
                s.send(Job::Drain(tx.clone())).expect("reduction thread alive");
            }
            drop(tx);
            for local in rx {
                combine_into(&mut self.global, self.flavor, local);
            }
        }
    }

    pub fn get(&mut self, key: &K) -> Option<&Aggregate> {
        self.flush();
        self.global.get(key)
    }

    pub fn len(&mut self) -> usize {
        self.flush();
        self.global.len()
    }

    pub fn is_empty(&mut self) -> bool {
        self.len() == 0
    }

    /// All entries sorted by key.
    pub fn snapshot(&mut self) -> Vec<(K, Aggregate)> {
        self.flush();
        let mut v: Vec<(K, Aggregate)> = self.global.iter().map(|(k, a)| (*k, a.clone())).collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    /// Consumes the map, returning its entries sorted by key.
    pub fn into_sorted(mut self) -> Vec<(K, Aggregate)> {
        self.flush();
        let mut v: Vec<(K, Aggregate)> = std::mem::take(&mut self.global).into_iter().collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    /// Absorbs another container of the same flavor.
    pub fn merge(&mut self, mut other: HtMap<K>) -> Result<(), HtError> {
        if self.flavor != other.flavor {
            return Err(HtError::FlavorMismatch(other.flavor, self.flavor));
        }
        other.flush();
        self.flush();
        let table = std::mem::take(&mut other.global);
        combine_into(&mut self.global, self.flavor, table);
        Ok(())
    }
}

/// Key set on top of [`HtMap`]: membership is only observable after the
/// pending inserts are reduced, which `contains` does implicitly.
pub struct HtSet<K: Copy + Hash + Eq + Send + Sync + 'static> {
    inner: HtMap<K>,
}

impl<K: Copy + Hash + Eq + Ord + Send + Sync + 'static> HtSet<K> {
    pub fn new() -> Self {
        Self::with_config(HtConfig::default())
    }

    pub fn with_config(config: HtConfig) -> Self {
        HtSet {
            inner: HtMap::with_config(Flavor::Count, config),
        }
    }

    #[inline]
    pub fn insert(&mut self, key: K) {
        self.inner.insert(key, 0);
    }

    pub fn contains(&mut self, key: &K) -> bool {
        self.inner.get(key).is_some()
    }

    pub fn merge(&mut self, other: HtSet<K>) {
        self.inner.merge(other.inner).expect("sets share a flavor");
    }

    /// Members in ascending order.
    pub fn snapshot(&mut self) -> Vec<K> {
        self.inner.snapshot().into_iter().map(|(k, _)| k).collect()
    }
}

impl<K: Copy + Hash + Eq + Ord + Send + Sync + 'static> Default for HtSet<K> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(flavor: Flavor, reducers: usize) -> HtMap<u32> {
        HtMap::with_config(
            flavor,
            HtConfig {
                buffer_capacity: 8,
                reducers,
            },
        )
    }

    #[test]
    fn flavors() {
        type Case = (Flavor, &'static [(u32, u64)], Aggregate);
        let cases: [Case; 6] = [
            (Flavor::Count, &[(1, 5), (1, 9)], Aggregate::Count(2)),
            (Flavor::Sum, &[(1, u64::MAX), (1, 2)], Aggregate::Sum(1)),
            (Flavor::Min, &[(1, 5), (1, 3)], Aggregate::Min(3)),
            (Flavor::Max, &[(1, 5), (1, 3)], Aggregate::Max(5)),
            (
                Flavor::Constant,
                &[(1, 5), (1, 5)],
                Aggregate::Constant {
                    value: 5,
                    constant: true,
                },
            ),
            (
                Flavor::Set { limit: Some(2) },
                &[(1, 9), (1, 4), (1, 9), (1, 7)],
                Aggregate::Set(BoundedSet {
                    values: vec![4, 7],
                    saturated: true,
                }),
            ),
        ];
        for (flavor, inserts, expected) in cases {
            let mut m = small(flavor, 2);
            for &(k, v) in inserts {
                m.insert(k, v);
            }
            assert_eq!(m.snapshot(), vec![(1, expected)], "{flavor:?}");
        }
    }

    #[test]
    fn constant_breaks() {
        let mut m = small(Flavor::Constant, 1);
        m.insert(3, 1);
        m.insert(3, 2);
        m.insert(3, 1);
        assert!(!m.get(&3).unwrap().is_constant());
        assert_eq!(m.get(&3).unwrap().scalar(), Some(0));
    }

    #[test]
    fn merge_checks_flavor() {
        let mut a = small(Flavor::Count, 1);
        let b = small(Flavor::Sum, 1);
        assert!(a.merge(b).is_err());
        let mut c = small(Flavor::Count, 3);
        for i in 0..100 {
            a.insert(i % 7, 0);
            c.insert(i % 5, 0);
        }
        a.merge(c).unwrap();
        let total: u64 = a.snapshot().iter().map(|(_, g)| g.scalar().unwrap()).sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn reuses_buffers_across_rounds() {
        let mut m = small(Flavor::Sum, 3);
        for i in 0..10_000u32 {
            m.insert(i % 13, 1);
        }
        let snap = m.snapshot();
        assert_eq!(snap.len(), 13);
        assert_eq!(snap.iter().map(|(_, a)| a.scalar().unwrap()).sum::<u64>(), 10_000);
        m.insert(0, 1);
        assert_eq!(m.get(&0).unwrap().scalar(), Some(771));
    }

    #[test]
    fn set_membership() {
        let mut s: HtSet<u64> = HtSet::with_config(HtConfig {
            buffer_capacity: 4,
            reducers: 2,
        });
        for k in [5, 1, 5, 9, 1, 3] {
            s.insert(k);
        }
        assert!(s.contains(&9) && !s.contains(&2));
        let mut t = HtSet::new();
        t.insert(2);
        s.merge(t);
        assert_eq!(s.snapshot(), vec![1, 2, 3, 5, 9]);
    }
}
