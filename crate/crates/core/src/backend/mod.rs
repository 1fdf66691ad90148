//! The worker side: every backend worker drains its own consumer of the event
//! queue, replays context events into a private [`ContextManager`], and hands
//! the events it owns to its copy of the analysis module. When the stream
//! ends, the per-worker modules are merged and finalized into a [`Profile`].

pub mod context;
pub mod shadow;

use std::fmt;

use thiserror::Error;

use crate::event::{EventDecoder, EventError, Event, EventKind, EventSpec};
use crate::queue::{Consumer, QueueError};

pub use context::{
    ContextError, ContextFrame, ContextId, ContextManager, FrameType, LoopFilter, LoopLevel, LoopPoint, SharedLoop,
};
pub use shadow::ShadowMemory;

/// Address bits dropped to form the ownership key of a byte.
pub const DEFAULT_GRANULE_SHIFT: u32 = 6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("module `{module}` needs events the stream does not carry")]
    SpecMismatch { module: String },
    #[error("module `{0}` cannot merge worker results; run it with one worker")]
    MergeUnsupported(String),
    #[error("expected {expected} consumers, got {got}")]
    WorkerCount { expected: usize, got: usize },
    #[error("worker {worker}: {source}")]
    Queue { worker: usize, source: QueueError },
    #[error("worker {worker}: {source}")]
    Decode { worker: usize, source: EventError },
    #[error("worker {worker}: {source}")]
    Context { worker: usize, source: ContextError },
    #[error("stream ended without a stream_end marker")]
    Truncated,
    #[error("{0}")]
    Module(String),
}

/// Hash-partitions keys across `num_workers`.
#[inline]
pub fn owner_of(key: u64, num_workers: usize) -> usize {
    ((key.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32) % num_workers as u64) as usize
}

/// The slice of the key space one worker is responsible for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shard {
    pub tid: usize,
    pub num_workers: usize,
    pub granule_shift: u32,
}

impl Shard {
    pub fn new(tid: usize, num_workers: usize) -> Self {
        assert!(tid < num_workers);
        Shard {
            tid,
            num_workers,
            granule_shift: DEFAULT_GRANULE_SHIFT,
        }
    }

    pub fn single() -> Self {
        Shard::new(0, 1)
    }

    #[inline]
    pub fn owns_key(&self, key: u64) -> bool {
        self.num_workers == 1 || owner_of(key, self.num_workers) == self.tid
    }

    #[inline]
    pub fn granule(&self, addr: u64) -> u64 {
        addr >> self.granule_shift
    }

    #[inline]
    pub fn owns_addr(&self, addr: u64) -> bool {
        self.owns_key(self.granule(addr))
    }

    /// Routes an access of `size` bytes at `addr` by granule when it fits in
    /// one, else to everyone (the module then filters per byte).
    #[inline]
    pub fn route_range(&self, addr: u64, size: u64) -> Route {
        let last = addr.wrapping_add(size.max(1) - 1);
        if self.granule(addr) == self.granule(last) {
            Route::Key(self.granule(addr))
        } else {
            Route::All
        }
    }
}

/// Which workers see a non-context event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    All,
    Key(u64),
    Skip,
}

/// An analysis plugged into the backend. One instance runs per worker.
pub trait Module: Send + Sized {
    fn name(&self) -> &str;

    /// Events and arguments the module reads.
    fn event_spec(&self) -> EventSpec;

    fn route(&self, ev: &Event) -> Route;

    /// Called for every routed event, after the context manager has applied
    /// it if it is a context event.
    fn on_event(&mut self, ev: &Event, cx: &ContextManager);

    fn supports_merge(&self) -> bool {
        true
    }

    fn merge(&mut self, other: Self) -> Result<(), BackendError>;

    /// Profile records in any order.
    fn finalize(self, cx: &ContextManager) -> Vec<String>;
}

/// Sorted textual analysis result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub module: String,
    pub workers: usize,
    pub records: Vec<String>,
}

const HEADER_PREFIX: &str = "# prompt-profile v1";
const FOOTER: &str = "# end";

impl Profile {
    pub fn new(module: impl Into<String>, workers: usize, mut records: Vec<String>) -> Self {
        records.sort_unstable();
        Profile {
            module: module.into(),
            workers,
            records,
        }
    }

    /// Records only, one per line.
    pub fn body(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Profile, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty profile")?;
        let rest = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| format!("bad header `{header}`"))?;
        let mut module = None;
        let mut workers = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("module", m)) => module = Some(m.to_string()),
                Some(("workers", w)) => workers = w.parse().ok(),
                _ => return Err(format!("bad header field `{field}`")),
            }
        }
        let mut records = Vec::new();
        let mut ended = false;
        for line in lines {
            if ended {
                return Err("text after end marker".into());
            }
            if line == FOOTER {
                ended = true;
            } else {
                records.push(line.to_string());
            }
        }
        if !ended {
            return Err("missing end marker".into());
        }
        Ok(Profile::new(
            module.ok_or("missing module")?,
            workers.ok_or("missing workers")?,
            records,
        ))
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{HEADER_PREFIX} module={} workers={}", self.module, self.workers)?;
        for r in &self.records {
            writeln!(f, "{r}")?;
        }
        writeln!(f, "{FOOTER}")
    }
}

fn worker_loop<M: Module>(
    worker: usize,
    mut consumer: Consumer,
    module: &mut M,
    spec: &EventSpec,
    shard: Shard,
) -> Result<ContextManager, BackendError> {
    let mut cx = ContextManager::new();
    let mut ended = false;
    while let Some(chunk) = consumer
        .next_chunk()
        .map_err(|source| BackendError::Queue { worker, source })?
    {
        for ev in EventDecoder::new(chunk.words, spec) {
            let ev = ev.map_err(|source| BackendError::Decode { worker, source })?;
            if ev.kind == EventKind::StreamEnd {
                ended = true;
                break;
            }
            if ev.kind.is_context() {
                cx.apply(&ev).map_err(|source| BackendError::Context { worker, source })?;
            }
            let mine = match module.route(&ev) {
                Route::All => true,
                Route::Key(k) => shard.owns_key(k),
                Route::Skip => false,
            };
            if mine {
                module.on_event(&ev, &cx);
            }
        }
    }
    if !ended {
        return Err(BackendError::Truncated);
    }
    Ok(cx)
}

/// Runs one module instance per consumer until the stream ends, then merges
/// them into worker 0 and renders the profile. `stream_spec` is the event spec the
/// producer encoded with; it must cover the module's own spec.
pub fn run_backend<M, F>(stream_spec: &EventSpec, consumers: Vec<Consumer>, make: F) -> Result<Profile, BackendError>
where
    M: Module,
    F: Fn(Shard) -> M,
{
    let n = consumers.len();
    if n == 0 {
        return Err(BackendError::WorkerCount { expected: 1, got: 0 });
    }
    let mut modules: Vec<M> = (0..n).map(|tid| make(Shard::new(tid, n))).collect();
    let name = modules[0].name().to_string();
    if !stream_spec.covers(&modules[0].event_spec()) {
        return Err(BackendError::SpecMismatch { module: name });
    }
    if n > 1 && !modules[0].supports_merge() {
        return Err(BackendError::MergeUnsupported(name));
    }

    let results: Vec<Result<ContextManager, BackendError>> = std::thread::scope(|s| {
        let handles: Vec<_> = consumers
            .into_iter()
            .zip(modules.iter_mut())
            .enumerate()
            .map(|(tid, (consumer, module))| {
                let shard = Shard::new(tid, n);
                std::thread::Builder::new()
                    .name(format!("backend-{tid}"))
                    .spawn_scoped(s, move || worker_loop(tid, consumer, module, stream_spec, shard))
                    .expect("spawn backend worker")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("backend worker panicked"))
            .collect()
    });

    let mut contexts = Vec::with_capacity(n);
    for r in results {
        contexts.push(r?);
    }
    let mut modules = modules.into_iter();
    let mut head = modules.next().expect("at least one worker");
    for m in modules {
        head.merge(m)?;
    }
    let cx = contexts.swap_remove(0);
    let records = head.finalize(&cx);
    Ok(Profile::new(name, n, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Arg;
    use crate::queue::{create, QueueConfig};
    use crate::trace::replay;

    struct Counter {
        shard: Shard,
        loads: u64,
        max_depth: usize,
        mergeable: bool,
    }

    impl Module for Counter {
        fn name(&self) -> &str {
            "counter"
        }
        fn event_spec(&self) -> EventSpec {
            let mut s = EventSpec::new("counter").with(EventKind::Load, &[Arg::Address]);
            for k in EventKind::CONTEXT {
                s = s.with(k, &[]);
            }
            s
        }
        fn route(&self, ev: &Event) -> Route {
            match ev.kind {
                EventKind::Load => self.shard.route_range(ev.address, ev.size as u64),
                _ => Route::All,
            }
        }
        fn on_event(&mut self, ev: &Event, cx: &ContextManager) {
            if ev.kind == EventKind::Load {
                self.loads += 1;
            }
            self.max_depth = self.max_depth.max(cx.depth());
        }
        fn supports_merge(&self) -> bool {
            self.mergeable
        }
        fn merge(&mut self, other: Self) -> Result<(), BackendError> {
            self.loads += other.loads;
            self.max_depth = self.max_depth.max(other.max_depth);
            Ok(())
        }
        fn finalize(self, _: &ContextManager) -> Vec<String> {
            vec![format!("loads {}", self.loads), format!("depth {}", self.max_depth)]
        }
    }

    fn events() -> Vec<Event> {
        let mut v = vec![Event::bare(EventKind::ProgramStart, 0), Event::bare(EventKind::FunctionEntry, 1)];
        for i in 0..1000u64 {
            v.push(Event::load(2, 0x1000 + 8 * i, i, 8));
        }
        v.push(Event::bare(EventKind::FunctionExit, 1));
        v.push(Event::bare(EventKind::ProgramEnd, 0));
        v
    }

    fn run(workers: usize, mergeable: bool, spec: &EventSpec) -> Result<Profile, BackendError> {
        let (mut p, cs) = create(QueueConfig::new(4096, workers)).unwrap();
        let evs = events();
        let spec2 = spec.clone();
        let producer = std::thread::spawn(move || replay(&evs, &spec2, &mut p));
        let r = run_backend(spec, cs, |shard| Counter {
            shard,
            loads: 0,
            max_depth: 0,
            mergeable,
        });
        let _ = producer.join().unwrap();
        r
    }

    #[test]
    fn partitions_and_merges() {
        let spec = EventSpec::full("stream");
        for w in [1, 2, 4] {
            let p = run(w, true, &spec).unwrap();
            assert_eq!(p.records, vec!["depth 1", "loads 1000"]);
            assert_eq!(p.workers, w);
        }
    }

    #[test]
    fn refuses_unmergeable_with_many_workers() {
        let spec = EventSpec::full("stream");
        assert!(run(1, false, &spec).is_ok());
        assert!(matches!(run(3, false, &spec), Err(BackendError::MergeUnsupported(_))));
    }

    #[test]
    fn refuses_uncovered_spec() {
        let spec = EventSpec::new("narrow").with(EventKind::Load, &[Arg::Address]);
        assert!(matches!(run(1, true, &spec), Err(BackendError::SpecMismatch { .. })));
    }

    #[test]
    fn owner_of_is_uniform() {
        for n in [2usize, 3, 4, 8] {
            let mut hist = vec![0u64; n];
            let samples = 200_000u64;
            for k in 0..samples {
                hist[owner_of(k, n)] += 1;
            }
            let expected = samples as f64 / n as f64;
            for &h in &hist {
                assert!((h as f64 - expected).abs() / expected < 0.05, "{n}: {hist:?}");
            }
        }
    }

    #[test]
    fn profile_text_round_trip() {
        let p = Profile::new("m", 2, vec!["b".into(), "a".into()]);
        let text = p.to_string();
        assert_eq!(text, "# prompt-profile v1 module=m workers=2\na\nb\n# end\n");
        assert_eq!(Profile::parse(&text).unwrap(), p);
        assert!(Profile::parse("# prompt-profile v1 module=m workers=2\na\n").is_err());
    }
}
