//! Throughput measurements for the queue and the aggregating map.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prompt_kit::event::{encode_event, Event, EventKind, EventSpec};
use prompt_kit::ht::{Flavor, HtConfig, HtMap};
use prompt_kit::queue::{create, LockedQueue, QueueConfig, QueueError};

const POOL_EVENTS: usize = 1 << 14;

/// A cycle of pre-encoded events of mixed kinds and sizes.
pub struct EventPool {
    words: Vec<u64>,
    offsets: Vec<usize>,
}

impl EventPool {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = EventSpec::full("bench");
        let mut words = Vec::new();
        let mut offsets = vec![0];
        for _ in 0..POOL_EVENTS {
            let addr = rng.random_range(1..u64::MAX);
            let id = rng.random_range(1..u32::MAX);
            let ev = match rng.random_range(0..10) {
                0..=3 => Event::load(id, addr, rng.random(), [1, 2, 4, 8][rng.random_range(0..4)]),
                4..=6 => Event::store(id, addr, rng.random(), [1, 2, 4, 8][rng.random_range(0..4)]),
                7 => Event::pointer_create(id, addr, rng.random()),
                8 => Event::alloc(EventKind::HeapAlloc, id, addr, rng.random_range(1..4096)),
                _ => Event::bare(EventKind::LoopIter, id),
            };
            words.extend(encode_event(&ev, &spec).expect("valid bench event"));
            offsets.push(words.len());
        }
        EventPool { words, offsets }
    }

    #[inline]
    pub fn event(&self, i: usize) -> &[u64] {
        let i = i % POOL_EVENTS;
        &self.words[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Order-sensitive digest of a word sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Digest(u64);

impl Digest {
    #[inline]
    pub fn update(&mut self, words: &[u64]) {
        for &w in words {
            self.0 = (self.0 ^ w).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(7);
        }
    }
}

/// Cheap order-insensitive digest, used when only throughput matters.
#[inline]
fn sum(words: &[u64]) -> u64 {
    words.iter().fold(0u64, |a, &w| a.wrapping_add(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verify {
    /// Wrapping sum of all words.
    Sum,
    /// Order-sensitive digest.
    Ordered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueResult {
    pub events: u64,
    pub consumers: usize,
    pub secs: f64,
    /// Every consumer's digest matched the producer's.
    pub intact: bool,
}

impl QueueResult {
    pub fn events_per_sec(&self) -> f64 {
        self.events as f64 / self.secs.max(1e-9)
    }
}

/// Streams `events` pool events through the ping-pong queue.
pub fn spmc_queue(
    pool: &EventPool,
    events: u64,
    consumers: usize,
    buffer_bytes: usize,
    verify: Verify,
) -> Result<QueueResult, QueueError> {
    let (mut producer, cs) = create(QueueConfig::new(buffer_bytes, consumers))?;
    let start = Instant::now();
    // The producer moves into the scope so an early error drops it, which
    // disconnects the consumers instead of leaving them waiting.
    let (expected, got) = std::thread::scope(move |s| {
        let handles: Vec<_> = cs
            .into_iter()
            .map(|mut c| {
                s.spawn(move || -> Result<u64, QueueError> {
                    let mut d = Digest::default();
                    let mut total = 0u64;
                    while let Some(chunk) = c.next_chunk()? {
                        match verify {
                            Verify::Sum => total = total.wrapping_add(sum(&chunk)),
                            Verify::Ordered => d.update(&chunk),
                        }
                    }
                    Ok(if verify == Verify::Sum { total } else { d.0 })
                })
            })
            .collect();
        let mut d = Digest::default();
        let mut total = 0u64;
        for i in 0..events as usize {
            let ev = pool.event(i);
            producer.produce(ev)?;
            match verify {
                Verify::Sum => total = total.wrapping_add(sum(ev)),
                Verify::Ordered => d.update(ev),
            }
        }
        producer.end_stream()?;
        producer.close()?;
        if verify == Verify::Ordered {
            d.update(&[0]);
        }
        let got: Vec<Result<u64, QueueError>> = handles.into_iter().map(|h| h.join().expect("consumer")).collect();
        Ok::<_, QueueError>((if verify == Verify::Sum { total } else { d.0 }, got))
    })?;
    let secs = start.elapsed().as_secs_f64();
    let mut intact = true;
    for g in got {
        intact &= g? == expected;
    }
    Ok(QueueResult {
        events,
        consumers,
        secs,
        intact,
    })
}

/// Same stream through the single-lock baseline.
pub fn locked_queue(pool: &EventPool, events: u64, consumers: usize, buffer_bytes: usize) -> QueueResult {
    let (tx, rxs) = LockedQueue::create(buffer_bytes / 8, consumers);
    let start = Instant::now();
    let (expected, got) = std::thread::scope(|s| {
        let handles: Vec<_> = rxs
            .into_iter()
            .map(|rx| {
                s.spawn(move || {
                    let mut buf = Vec::new();
                    let mut total = 0u64;
                    while rx.recv(&mut buf) {
                        total = total.wrapping_add(sum(&buf));
                    }
                    total
                })
            })
            .collect();
        let mut total = 0u64;
        for i in 0..events as usize {
            let ev = pool.event(i);
            tx.send(ev);
            total = total.wrapping_add(sum(ev));
        }
        tx.close();
        let got: Vec<u64> = handles.into_iter().map(|h| h.join().expect("consumer")).collect();
        (total, got)
    });
    QueueResult {
        events,
        consumers,
        secs: start.elapsed().as_secs_f64(),
        intact: got.iter().all(|&g| g == expected),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub inserts: u64,
    pub secs: f64,
    pub keys: usize,
}

impl MapResult {
    pub fn ops_per_sec(&self) -> f64 {
        self.inserts as f64 / self.secs.max(1e-9)
    }
}

fn keys(seed: u64, n: u64, distinct: u64) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(move |_| rng.random_range(0..distinct))
}

/// Count-flavor inserts into an [`HtMap`] with `reducers` reduction threads.
pub fn ht_count(inserts: u64, distinct: u64, reducers: usize, seed: u64) -> MapResult {
    let start = Instant::now();
    let mut m = HtMap::with_config(
        Flavor::Count,
        HtConfig {
            reducers,
            ..HtConfig::default()
        },
    );
    for k in keys(seed, inserts, distinct) {
        m.insert(k, 1);
    }
    let n = m.len();
    MapResult {
        inserts,
        secs: start.elapsed().as_secs_f64(),
        keys: n,
    }
}

/// The same inserts into a std `HashMap` counter.
pub fn naive_count(inserts: u64, distinct: u64, seed: u64) -> MapResult {
    let start = Instant::now();
    let mut m: HashMap<u64, u64> = HashMap::new();
    for k in keys(seed, inserts, distinct) {
        *m.entry(k).or_default() += 1;
    }
    MapResult {
        inserts,
        secs: start.elapsed().as_secs_f64(),
        keys: m.len(),
    }
}
