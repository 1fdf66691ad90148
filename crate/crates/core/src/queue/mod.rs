//! Bounded broadcast SPMC queue built from two ping-pong buffers.
//!
//! The producer appends whole encoded events to the active buffer without
//! touching any shared state. When the next event does not fit, the buffer is
//! sealed (length + generation published with release ordering) and the
//! producer moves to the other buffer, first waiting until every consumer has
//! released it. Consumers receive each sealed buffer as one [`Chunk`] and
//! release it when they ask for the next one. Synchronization therefore only
//! happens at buffer boundaries.
//!
//! Generations are numbered from 1; generation `g` lives in buffer `(g - 1) % 2`.

mod baseline;
mod region;

use std::path::Path;
use std::sync::atomic::Ordering::{Acquire, Relaxed, Release};
use std::sync::Arc;

use thiserror::Error;

pub use baseline::{LockedQueue, LockedReceiver, LockedSender};
use region::{slot, Region, ABORTED, MAGIC};

/// Default capacity of each buffer.
pub const DEFAULT_BUFFER_BYTES: usize = 2 << 20;
pub const MIN_BUFFER_BYTES: usize = 4096;
pub const MAX_CONSUMERS: usize = 64;

const SPIN_LIMIT: u32 = 64;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("buffer size {0} must be a multiple of 8 and at least 4096 bytes")]
    BadBufferSize(usize),
    #[error("consumer count {0} must be between 1 and 64")]
    BadConsumerCount(usize),
    #[error("event of {words} words exceeds the {capacity}-word buffer")]
    EventTooLarge { words: usize, capacity: usize },
    #[error("stream already ended")]
    StreamEnded,
    #[error("queue is closed")]
    Closed,
    #[error("close requested before the stream end was produced")]
    MissingStreamEnd,
    #[error("producer disconnected without closing the queue")]
    Disconnected,
    #[error("all {0} consumer slots are taken")]
    NoFreeConsumer(usize),
    #[error("queue file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueConfig {
    pub buffer_bytes: usize,
    pub num_consumers: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            num_consumers: 1,
        }
    }
}

impl QueueConfig {
    pub fn new(buffer_bytes: usize, num_consumers: usize) -> Self {
        QueueConfig {
            buffer_bytes,
            num_consumers,
        }
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if self.buffer_bytes % 8 != 0 || self.buffer_bytes < MIN_BUFFER_BYTES {
            return Err(QueueError::BadBufferSize(self.buffer_bytes));
        }
        if self.num_consumers == 0 || self.num_consumers > MAX_CONSUMERS {
            return Err(QueueError::BadConsumerCount(self.num_consumers));
        }
        Ok(())
    }

    fn buffer_words(&self) -> usize {
        self.buffer_bytes / 8
    }
}

fn all_mask(n: usize) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

#[inline]
fn buffer_of(generation: u64) -> usize {
    ((generation - 1) % 2) as usize
}

/// Spins briefly, then yields; the queue never parks threads.
struct Backoff(u32);

impl Backoff {
    fn new() -> Self {
        Backoff(0)
    }

    fn snooze(&mut self) {
        if self.0 < SPIN_LIMIT {
            std::hint::spin_loop();
            self.0 += 1;
        } else {
            std::thread::yield_now();
        }
    }
}

/// Creates an in-process queue with one producer and `num_consumers` consumers.
pub fn create(cfg: QueueConfig) -> Result<(Producer, Vec<Consumer>), QueueError> {
    cfg.validate()?;
    let region = Arc::new(Region::heap(cfg.buffer_words()));
    init_control(&region, cfg);
    let consumers = (0..cfg.num_consumers)
        .map(|i| {
            region.ctrl(slot::CLAIMED).fetch_or(1 << i, Relaxed);
            Consumer::new(region.clone(), i)
        })
        .collect();
    Ok((Producer::new(region, cfg.num_consumers), consumers))
}

fn init_control(region: &Region, cfg: QueueConfig) {
    region.ctrl(slot::BUFFER_WORDS).store(cfg.buffer_words() as u64, Relaxed);
    region.ctrl(slot::NUM_CONSUMERS).store(cfg.num_consumers as u64, Relaxed);
    region.ctrl(slot::MAGIC).store(MAGIC, Release);
}

/// File-backed variant: the queue lives in a mapped file so producer and
/// consumers can run in separate processes.
pub mod file {
    use super::*;

    /// Creates the queue file at `path` and returns its producer.
    pub fn create(path: &Path, cfg: QueueConfig) -> Result<Producer, QueueError> {
        cfg.validate()?;
        let region = Arc::new(Region::create_file(path, cfg.buffer_words())?);
        init_control(&region, cfg);
        Ok(Producer::new(region, cfg.num_consumers))
    }

    /// Attaches to the queue at `path`, claiming the lowest free consumer slot.
    pub fn open_consumer(path: &Path) -> Result<Consumer, QueueError> {
        let region = Arc::new(Region::open_file(path)?);
        let n = region.ctrl(slot::NUM_CONSUMERS).load(Acquire) as usize;
        let claimed = region.ctrl(slot::CLAIMED);
        let mut current = claimed.load(Relaxed);
        loop {
            let free = !current & all_mask(n);
            if free == 0 {
                return Err(QueueError::NoFreeConsumer(n));
            }
            let index = free.trailing_zeros() as usize;
            match claimed.compare_exchange(current, current | 1 << index, Acquire, Relaxed) {
                Ok(_) => return Ok(Consumer::new(region, index)),
                Err(actual) => current = actual,
            }
        }
    }
}

/// Counters describing how often a handle touched shared control state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    /// Buffers sealed (producer) or chunks received (consumer).
    pub buffers: u64,
    /// Handoff points that read or wrote a shared control word.
    pub sync_events: u64,
    /// Handoffs that had to wait at least once.
    pub waits: u64,
}

/// The single writing end.
pub struct Producer {
    region: Arc<Region>,
    capacity: usize,
    all: u64,
    generation: u64,
    pos: usize,
    buf: *mut u64,
    ended: bool,
    closed: bool,
    stats: QueueStats,
}

// SAFETY: the raw buffer pointer refers into `region`, which is shared and
// kept alive by the Arc; the producer is the only writer of the active buffer.
unsafe impl Send for Producer {}

impl Producer {
    fn new(region: Arc<Region>, num_consumers: usize) -> Self {
        let buf = region.buffer_ptr(0);
        Producer {
            capacity: region.buffer_words(),
            region,
            all: all_mask(num_consumers),
            generation: 1,
            pos: 0,
            buf,
            ended: false,
            closed: false,
            stats: QueueStats::default(),
        }
    }

    pub fn capacity_words(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    /// Appends a run of whole encoded events. The run never straddles buffers.
    #[inline]
    pub fn produce(&mut self, words: &[u64]) -> Result<(), QueueError> {
        if self.ended {
            return Err(if self.closed {
                QueueError::Closed
            } else {
                QueueError::StreamEnded
            });
        }
        self.write(words)
    }

    #[inline]
    fn write(&mut self, words: &[u64]) -> Result<(), QueueError> {
        let n = words.len();
        if self.pos + n > self.capacity {
            if n > self.capacity {
                return Err(QueueError::EventTooLarge {
                    words: n,
                    capacity: self.capacity,
                });
            }
            self.seal();
            self.acquire_next();
        }
        // SAFETY: `pos + n <= capacity`, and no consumer reads this buffer
        // until it is sealed.
        unsafe {
            std::ptr::copy_nonoverlapping(words.as_ptr(), self.buf.add(self.pos), n);
        }
        self.pos += n;
        Ok(())
    }

    /// Appends the stream-end word; nothing may be produced afterwards.
    pub fn end_stream(&mut self) -> Result<(), QueueError> {
        if self.ended {
            return Err(QueueError::StreamEnded);
        }
        self.write(&[0])?;
        self.ended = true;
        Ok(())
    }

    fn seal(&mut self) {
        let b = buffer_of(self.generation);
        self.region.ctrl(slot::LEN[b]).store(self.pos as u64, Relaxed);
        self.region.ctrl(slot::SEQ[b]).store(self.generation, Release);
        self.generation += 1;
        self.pos = 0;
        self.stats.buffers += 1;
        self.stats.sync_events += 1;
    }

    /// Waits until every consumer has released the buffer of the current
    /// generation, then makes it writable.
    fn acquire_next(&mut self) {
        let b = buffer_of(self.generation);
        self.buf = self.region.buffer_ptr(b);
        if self.generation <= 2 {
            return;
        }
        self.stats.sync_events += 1;
        let done = self.region.ctrl(slot::DONE[b]);
        let detached = self.region.ctrl(slot::DETACHED);
        let mut backoff = Backoff::new();
        let mut waited = false;
        while (done.load(Acquire) | detached.load(Acquire)) & self.all != self.all {
            waited = true;
            backoff.snooze();
        }
        self.stats.waits += waited as u64;
        done.store(0, Relaxed);
    }

    /// Seals the active buffer and lets consumers drain to end-of-stream.
    /// Requires [`Producer::end_stream`] first.
    pub fn close(&mut self) -> Result<(), QueueError> {
        if self.closed {
            return Err(QueueError::Closed);
        }
        if !self.ended {
            return Err(QueueError::MissingStreamEnd);
        }
        let last = self.generation;
        self.seal();
        self.region.ctrl(slot::FINAL_GEN).store(last, Release);
        self.closed = true;
        Ok(())
    }
}

impl Drop for Producer {
    fn drop(&mut self) {
        if !self.closed {
            self.region
                .ctrl(slot::FINAL_GEN)
                .store(ABORTED, Release);
        }
    }
}

/// Immutable view of one sealed buffer; valid until the consumer asks for
/// its next chunk.
#[derive(Debug, Clone, Copy)]
pub struct Chunk<'a> {
    pub words: &'a [u64],
    pub generation: u64,
}

impl std::ops::Deref for Chunk<'_> {
    type Target = [u64];

    fn deref(&self) -> &[u64] {
        self.words
    }
}

/// One reading end. Every consumer receives every sealed buffer.
pub struct Consumer {
    region: Arc<Region>,
    index: usize,
    bit: u64,
    generation: u64,
    held: Option<usize>,
    finished: bool,
    stats: QueueStats,
}

impl Consumer {
    fn new(region: Arc<Region>, index: usize) -> Self {
        Consumer {
            region,
            index,
            bit: 1 << index,
            generation: 1,
            held: None,
            finished: false,
            stats: QueueStats::default(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    fn release_held(&mut self) {
        if let Some(b) = self.held.take() {
            self.region.ctrl(slot::DONE[b]).fetch_or(self.bit, Release);
            self.stats.sync_events += 1;
        }
    }

    /// Releases the previous chunk and blocks until the next sealed buffer is
    /// available. Returns `Ok(None)` once the stream is exhausted.
    pub fn next_chunk(&mut self) -> Result<Option<Chunk<'_>>, QueueError> {
        self.release_held();
        if self.finished {
            return Ok(None);
        }
        let g = self.generation;
        let b = buffer_of(g);
        let seq = self.region.ctrl(slot::SEQ[b]);
        let final_gen = self.region.ctrl(slot::FINAL_GEN);
        let mut backoff = Backoff::new();
        let mut waited = false;
        self.stats.sync_events += 1;
        loop {
            if seq.load(Acquire) == g {
                break;
            }
            let fin = final_gen.load(Acquire);
            if fin & ABORTED != 0 {
                return Err(QueueError::Disconnected);
            }
            if fin != 0 && fin < g {
                self.finished = true;
                return Ok(None);
            }
            waited = true;
            backoff.snooze();
        }
        self.stats.waits += waited as u64;
        let len = self.region.ctrl(slot::LEN[b]).load(Relaxed) as usize;
        self.held = Some(b);
        self.generation += 1;
        self.stats.buffers += 1;
        // SAFETY: the acquire load of SEQ synchronizes with the producer's
        // release in `seal`, so `len` words are initialized; the producer will
        // not write this buffer again until our DONE bit is set.
        let words = unsafe { std::slice::from_raw_parts(self.region.buffer_ptr(b), len) };
        Ok(Some(Chunk {
            words,
            generation: g,
        }))
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.release_held();
        self.region.ctrl(slot::DETACHED).fetch_or(self.bit, Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn drain(mut c: Consumer) -> (Vec<u64>, Vec<usize>) {
        let mut words = Vec::new();
        let mut lens = Vec::new();
        while let Some(chunk) = c.next_chunk().unwrap() {
            lens.push(chunk.len());
            words.extend_from_slice(&chunk);
        }
        (words, lens)
    }

    #[test]
    fn config_validation() {
        assert!(create(QueueConfig::new(100, 1)).is_err());
        assert!(create(QueueConfig::new(4088, 1)).is_err());
        assert!(create(QueueConfig::new(4096, 0)).is_err());
        assert!(create(QueueConfig::new(4096, 65)).is_err());
        let (_, cs) = create(QueueConfig::new(4096, 1)).unwrap();
        assert_eq!(cs.len(), 1);
        let (_, cs) = create(QueueConfig::new(DEFAULT_BUFFER_BYTES, 8)).unwrap();
        assert_eq!(cs.len(), 8);
    }

    #[test]
    fn small_stream_needs_no_swap() {
        let (mut p, cs) = create(QueueConfig::default()).unwrap();
        p.produce(&[1, 2]).unwrap();
        p.produce(&[3]).unwrap();
        p.produce(&[4, 5, 6]).unwrap();
        assert_eq!(p.stats().buffers, 0);
        assert_eq!(p.stats().sync_events, 0);
        p.end_stream().unwrap();
        p.close().unwrap();
        let (words, lens) = drain(cs.into_iter().next().unwrap());
        assert_eq!(words, vec![1, 2, 3, 4, 5, 6, 0]);
        assert_eq!(lens, vec![7]);
    }

    #[test]
    fn event_never_straddles() {
        let (mut p, cs) = create(QueueConfig::new(4096, 1)).unwrap();
        let cap = p.capacity_words();
        for i in 0..cap - 1 {
            p.produce(&[i as u64 + 1]).unwrap();
        }
        assert_eq!(p.stats().buffers, 0);
        p.produce(&[7, 7]).unwrap();
        assert_eq!(p.stats().buffers, 1);
        p.end_stream().unwrap();
        p.close().unwrap();
        let (words, lens) = drain(cs.into_iter().next().unwrap());
        assert_eq!(lens, vec![cap - 1, 3]);
        assert_eq!(&words[cap - 1..], &[7, 7, 0]);
    }

    #[test]
    fn oversized_event_rejected() {
        let (mut p, _cs) = create(QueueConfig::new(4096, 1)).unwrap();
        let big = vec![1u64; 513];
        assert!(matches!(p.produce(&big), Err(QueueError::EventTooLarge { .. })));
    }

    #[test]
    fn close_protocol_errors() {
        let (mut p, _cs) = create(QueueConfig::new(4096, 1)).unwrap();
        assert!(matches!(p.close(), Err(QueueError::MissingStreamEnd)));
        p.end_stream().unwrap();
        assert!(matches!(p.produce(&[1]), Err(QueueError::StreamEnded)));
        p.close().unwrap();
        assert!(matches!(p.close(), Err(QueueError::Closed)));
        assert!(matches!(p.produce(&[1]), Err(QueueError::Closed)));
    }

    #[test]
    fn dropped_producer_disconnects_consumers() {
        let (mut p, mut cs) = create(QueueConfig::new(4096, 1)).unwrap();
        p.produce(&[1]).unwrap();
        drop(p);
        assert!(matches!(cs[0].next_chunk(), Err(QueueError::Disconnected)));
    }

    #[test]
    fn broadcast_to_all_consumers() {
        let (mut p, cs) = create(QueueConfig::new(4096, 8)).unwrap();
        let handles: Vec<_> = cs.into_iter().map(|c| thread::spawn(move || drain(c))).collect();
        let mut expected = Vec::new();
        for i in 0..20_000u64 {
            let run = [i, i ^ 0xABCD, i * 3];
            let n = 1 + (i % 3) as usize;
            p.produce(&run[..n]).unwrap();
            expected.extend_from_slice(&run[..n]);
        }
        p.end_stream().unwrap();
        expected.push(0);
        p.close().unwrap();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        for (words, lens) in &results {
            assert_eq!(words, &expected);
            assert_eq!(lens, &results[0].1);
        }
        let st = p.stats();
        assert!(st.sync_events <= 2 * st.buffers + 2, "{st:?}");
    }

    #[test]
    fn detached_consumer_does_not_block_producer() {
        let (mut p, mut cs) = create(QueueConfig::new(4096, 2)).unwrap();
        drop(cs.pop());
        let c = cs.pop().unwrap();
        let h = thread::spawn(move || drain(c).0.len());
        for i in 0..10_000u64 {
            p.produce(&[i]).unwrap();
        }
        p.end_stream().unwrap();
        p.close().unwrap();
        assert_eq!(h.join().unwrap(), 10_001);
    }

    #[test]
    fn file_backed_queue() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        let mut p = file::create(&path, QueueConfig::new(4096, 2)).unwrap();
        let consumers: Vec<_> = (0..2).map(|_| file::open_consumer(&path).unwrap()).collect();
        assert!(matches!(file::open_consumer(&path), Err(QueueError::NoFreeConsumer(2))));
        let handles: Vec<_> = consumers
            .into_iter()
            .map(|c| thread::spawn(move || drain(c).0))
            .collect();
        let mut expected = Vec::new();
        for i in 0..5000u64 {
            p.produce(&[i, !i]).unwrap();
            expected.extend([i, !i]);
        }
        p.end_stream().unwrap();
        p.close().unwrap();
        expected.push(0);
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    }
}
