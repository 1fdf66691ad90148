//! Deterministic synthetic traces.
//!
//! * `stride-loop`: one loop whose iterations store and then load a strided
//!   slot (flow dependences inside and across iterations), creating a pointer
//!   to the slot every fourth iteration.
//! * `pointer-chase`: heap nodes from three allocation sites linked in a random
//!   cycle, walked inside a loop with a pointer created per hop; half the nodes
//!   are freed afterwards and a couple of dangling pointers are formed.
//! * `alloc-churn`: per-iteration allocate/use/free pairs, plus occasional
//!   objects freed one iteration later or never freed.
//!
//! [`RandomTrace`] produces small well-formed traces with arbitrary nesting for
//! differential testing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::event::{Event, EventKind, MAX_EVENT_SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("unknown workload `{0}` (expected stride-loop, pointer-chase or alloc-churn)")]
    UnknownWorkload(String),
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("{0}")]
    BadParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    StrideLoop,
    PointerChase,
    AllocChurn,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 3] = [
        WorkloadKind::StrideLoop,
        WorkloadKind::PointerChase,
        WorkloadKind::AllocChurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::StrideLoop => "stride-loop",
            WorkloadKind::PointerChase => "pointer-chase",
            WorkloadKind::AllocChurn => "alloc-churn",
        }
    }
}

impl FromStr for WorkloadKind {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, WorkloadError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| WorkloadError::UnknownWorkload(s.to_string()))
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named workload with its parameters.
///
/// Ranges: `iterations >= 1`; `1 <= stride <= 2^20`; `stride <= footprint <= 2^32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticWorkload {
    pub kind: WorkloadKind,
    pub iterations: u64,
    pub footprint: u64,
    pub stride: u64,
    pub seed: u64,
}

const PID: u32 = 1;
const STRIDE_BASE: u64 = 0x1_0000;
const STRIDE_BOUND: u64 = 0x8000;
const CHASE_BASE: u64 = 0x20_0000;
const CHURN_BASE: u64 = 0x400_0000;
const CHURN_HELD_BASE: u64 = 0x800_0000;
const CHURN_ESCAPE_BASE: u64 = 0x1000_0000;

/// Largest power-of-two access size (≤ 8) that fits in `stride`.
fn access_size(stride: u64) -> u32 {
    match stride {
        0..=1 => 1,
        2..=3 => 2,
        4..=7 => 4,
        _ => 8,
    }
}

impl SyntheticWorkload {
    pub fn new(kind: WorkloadKind, iterations: u64, footprint: u64, stride: u64, seed: u64) -> Self {
        SyntheticWorkload {
            kind,
            iterations,
            footprint,
            stride,
            seed,
        }
    }

    /// Default shape for `kind` with the given iteration count.
    pub fn with_iterations(kind: WorkloadKind, iterations: u64, seed: u64) -> Self {
        let (footprint, stride) = match kind {
            WorkloadKind::StrideLoop => (4096, 8),
            WorkloadKind::PointerChase => (1 << 16, 32),
            WorkloadKind::AllocChurn => (4096, 64),
        };
        Self::new(kind, iterations, footprint, stride, seed)
    }

    fn check(&self) -> Result<(), WorkloadError> {
        if self.iterations == 0 {
            return Err(WorkloadError::ZeroIterations);
        }
        if self.stride == 0 || self.stride > 1 << 20 {
            return Err(WorkloadError::BadParams("stride must be in 1..=2^20"));
        }
        if self.footprint < self.stride || self.footprint > 1 << 32 {
            return Err(WorkloadError::BadParams("footprint must be in stride..=2^32"));
        }
        if self.stride > MAX_EVENT_SIZE as u64 {
            return Err(WorkloadError::BadParams("stride exceeds the event size limit"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Event>, WorkloadError> {
        self.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = vec![Event::bare(EventKind::ProgramStart, PID)];
        match self.kind {
            WorkloadKind::StrideLoop => self.stride_loop(&mut rng, &mut out),
            WorkloadKind::PointerChase => self.pointer_chase(&mut rng, &mut out),
            WorkloadKind::AllocChurn => self.alloc_churn(&mut rng, &mut out),
        }
        out.push(Event::bare(EventKind::ProgramEnd, PID));
        Ok(out)
    }

    fn stride_loop(&self, rng: &mut ChaCha8Rng, out: &mut Vec<Event>) {
        const LOOP: u32 = 1;
        let size = access_size(self.stride);
        let slots = (self.footprint / self.stride).max(1);
        out.push(Event::bare(EventKind::LoopInvoke, LOOP));
        for i in 0..self.iterations {
            let addr = STRIDE_BASE + (i % slots) * self.stride;
            out.push(Event::bare(EventKind::LoopIter, LOOP));
            out.push(Event::store(1, addr, rng.random::<u64>() & mask(size), size));
            out.push(Event::load(2, addr, 0, size));
            if i % 4 == 3 {
                out.push(Event::pointer_create(3, addr, 1));
            }
            if i % 8 == 7 {
                // the loop re-reads its trip count
                out.push(Event::load(4, STRIDE_BOUND, self.iterations, 8));
            }
        }
        // the strided loads observe the stored value
        let mut last = 0;
        for ev in out.iter_mut() {
            match ev.kind {
                EventKind::Store => last = ev.value,
                EventKind::Load if ev.primary_id == 2 => ev.value = last,
                _ => {}
            }
        }
        out.push(Event::bare(EventKind::LoopExit, LOOP));
    }

    fn pointer_chase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<Event>) {
        const FUNC: u32 = 1;
        const LOOP: u32 = 2;
        let node_size = self.stride.max(16);
        let nodes = (self.footprint / node_size).clamp(1, 1 << 20);
        let addr_of = |n: u64| CHASE_BASE + n * node_size;

        // random cyclic permutation (Sattolo)
        let mut order: Vec<u64> = (0..nodes).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..i);
            order.swap(i, j);
        }
        let mut next = vec![0u64; nodes as usize];
        for w in 0..order.len() {
            next[order[w] as usize] = order[(w + 1) % order.len()];
        }

        out.push(Event::bare(EventKind::FunctionEntry, FUNC));
        for n in 0..nodes {
            out.push(Event::alloc(EventKind::HeapAlloc, 10 + (n % 3) as u32, addr_of(n), node_size as u32));
        }
        out.push(Event::bare(EventKind::LoopInvoke, LOOP));
        let mut cur = order[0];
        for i in 0..self.iterations {
            let nxt = next[cur as usize];
            out.push(Event::bare(EventKind::LoopIter, LOOP));
            out.push(Event::load(20, addr_of(cur), addr_of(nxt), 8));
            out.push(Event::pointer_create(30 + (i % 2) as u32, addr_of(nxt), 1));
            out.push(Event::store(21, addr_of(cur) + 8, i, 8));
            cur = nxt;
        }
        out.push(Event::bare(EventKind::LoopExit, LOOP));
        for n in (0..nodes).step_by(2) {
            out.push(Event::free(EventKind::HeapFree, 40, addr_of(n)));
        }
        out.push(Event::pointer_create(32, addr_of(0), 1));
        out.push(Event::pointer_create(33, 0x10, 1));
        out.push(Event::bare(EventKind::FunctionExit, FUNC));
    }

    fn alloc_churn(&self, rng: &mut ChaCha8Rng, out: &mut Vec<Event>) {
        const LOOP: u32 = 3;
        let obj = self.stride;
        let size = access_size(obj);
        let slots = (self.footprint / obj).max(1);
        let mut held: Option<u64> = None;
        out.push(Event::bare(EventKind::LoopInvoke, LOOP));
        for i in 0..self.iterations {
            out.push(Event::bare(EventKind::LoopIter, LOOP));
            if let Some(addr) = held.take() {
                out.push(Event::free(EventKind::HeapFree, 55, addr));
            }
            let addr = CHURN_BASE + (i % slots) * obj;
            let v = rng.random::<u64>() & mask(size);
            out.push(Event::alloc(EventKind::HeapAlloc, 50, addr, obj as u32));
            out.push(Event::store(51, addr, v, size));
            out.push(Event::load(52, addr, v, size));
            out.push(Event::free(EventKind::HeapFree, 53, addr));
            if i % 5 == 4 {
                let addr = CHURN_HELD_BASE + (i / 5 % 2) * obj;
                out.push(Event::alloc(EventKind::HeapAlloc, 54, addr, obj as u32));
                held = Some(addr);
            }
            if i % 7 == 6 {
                let addr = CHURN_ESCAPE_BASE + i * obj;
                out.push(Event::alloc(EventKind::HeapAlloc, 56, addr, obj as u32));
            }
        }
        out.push(Event::bare(EventKind::LoopExit, LOOP));
        if let Some(addr) = held {
            out.push(Event::free(EventKind::HeapFree, 55, addr));
        }
    }
}

fn mask(size: u32) -> u64 {
    if size >= 8 {
        u64::MAX
    } else {
        (1u64 << (size * 8)) - 1
    }
}

/// Generator of small, well-formed random traces.
///
/// Accesses hit at most `addresses` distinct start addresses spaced four bytes
/// apart, so 8-byte accesses overlap and some straddle 64-byte granules.
/// Function and loop frames nest up to `max_loop_depth` loops deep.
#[derive(Debug, Clone, Copy)]
pub struct RandomTrace {
    pub max_events: usize,
    pub addresses: u64,
    pub max_loop_depth: usize,
    pub functions: u32,
    pub loops: u32,
}

impl Default for RandomTrace {
    fn default() -> Self {
        RandomTrace {
            max_events: 10_000,
            addresses: 64,
            max_loop_depth: 3,
            functions: 3,
            loops: 4,
        }
    }
}

#[derive(Clone, Copy)]
enum Open {
    Func(u32),
    Loop(u32),
}

const RANDOM_ACCESS_BASE: u64 = 0x1038;
const RANDOM_OBJ_BASE: u64 = 0x1000;
const RANDOM_OBJ_SLOT: u64 = 0x40;
const RANDOM_OBJ_SLOTS: u64 = 8;

impl RandomTrace {
    pub fn generate(&self, seed: u64) -> Vec<Event> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budget = rng.random_range(self.max_events / 4..=self.max_events.max(8)).max(8);
        let mut out = vec![Event::bare(EventKind::ProgramStart, PID)];
        let mut open: Vec<Open> = Vec::new();
        // live objects: slot -> (free instr kind)
        let mut live: Vec<Option<EventKind>> = vec![None; RANDOM_OBJ_SLOTS as usize];
        let mut memory = std::collections::HashMap::<u64, u8>::new();

        let constants: [u64; 4] = std::array::from_fn(|_| rng.random_range(0..1u64 << 40));
        let globals = rng.random_range(0..3u64);
        for g in 0..globals {
            out.push(Event::alloc(EventKind::GlobalInit, 90 + g as u32, 0x8000 + g * 0x40, 16));
        }

        let reserve = self.max_loop_depth * 2 + 8;
        while out.len() + open.len() * 2 + reserve < budget {
            let depth = open.iter().filter(|o| matches!(o, Open::Loop(_))).count();
            let in_loop = matches!(open.last(), Some(Open::Loop(_)));
            match rng.random_range(0..100u32) {
                0..=4 if open.len() < 8 => {
                    let f = rng.random_range(1..=self.functions);
                    open.push(Open::Func(f));
                    out.push(Event::bare(EventKind::FunctionEntry, f));
                }
                5..=9 if depth < self.max_loop_depth => {
                    let l = rng.random_range(1..=self.loops);
                    open.push(Open::Loop(l));
                    out.push(Event::bare(EventKind::LoopInvoke, l));
                    if rng.random_bool(0.8) {
                        out.push(Event::bare(EventKind::LoopIter, l));
                    }
                }
                10..=14 if !open.is_empty() => match open.pop().unwrap() {
                    Open::Func(f) => out.push(Event::bare(EventKind::FunctionExit, f)),
                    Open::Loop(l) => out.push(Event::bare(EventKind::LoopExit, l)),
                },
                15..=29 if in_loop => {
                    if let Some(Open::Loop(l)) = open.last() {
                        out.push(Event::bare(EventKind::LoopIter, *l));
                    }
                }
                30..=35 => {
                    let slot = rng.random_range(0..RANDOM_OBJ_SLOTS);
                    let base = RANDOM_OBJ_BASE + slot * RANDOM_OBJ_SLOT;
                    match live[slot as usize] {
                        None => {
                            let (alloc, free, iid) = if rng.random_bool(0.7) {
                                (EventKind::HeapAlloc, EventKind::HeapFree, 60 + rng.random_range(0..4))
                            } else {
                                (EventKind::StackAlloc, EventKind::StackFree, 70 + rng.random_range(0..2))
                            };
                            let size = rng.random_range(1..=RANDOM_OBJ_SLOT) as u32;
                            out.push(Event::alloc(alloc, iid, base, size));
                            live[slot as usize] = Some(free);
                        }
                        Some(free) => {
                            out.push(Event::free(free, 80 + rng.random_range(0..2), base));
                            live[slot as usize] = None;
                        }
                    }
                }
                36..=37 => {
                    // free of an address that is not a live base
                    out.push(Event::free(EventKind::HeapFree, 85, 0x9000 + rng.random_range(0..4) * 8));
                }
                38..=44 => {
                    let addr = if rng.random_bool(0.8) {
                        RANDOM_OBJ_BASE + rng.random_range(0..RANDOM_OBJ_SLOTS * RANDOM_OBJ_SLOT)
                    } else {
                        0x8000 + rng.random_range(0..0x100)
                    };
                    out.push(Event::pointer_create(100 + rng.random_range(0..6), addr, rng.random_range(0..4)));
                }
                45..=49 => {
                    // loads of read-mostly data; 323 occasionally sees a new value
                    let k = rng.random_range(0..4u32);
                    let mut v = constants[k as usize];
                    if k == 3 && rng.random_bool(0.05) {
                        v ^= 1;
                    }
                    out.push(Event::load(320 + k, 0x8000 + 8 * k as u64, v, 8));
                }
                _ => {
                    let addr = RANDOM_ACCESS_BASE + 4 * rng.random_range(0..self.addresses);
                    let size = [1u32, 2, 4, 8][rng.random_range(0..4)];
                    let instr = rng.random_range(0..12u32);
                    if rng.random_bool(0.45) {
                        let v = if rng.random_bool(0.5) { 0x2A } else { rng.random_range(0..4u64) };
                        for b in 0..size as u64 {
                            memory.insert(addr + b, (v >> (8 * b)) as u8);
                        }
                        out.push(Event::store(200 + instr, addr, v & mask(size), size));
                    } else {
                        let mut v = 0u64;
                        for b in 0..size as u64 {
                            v |= (*memory.get(&(addr + b)).unwrap_or(&0) as u64) << (8 * b);
                        }
                        out.push(Event::load(300 + instr, addr, v, size));
                    }
                }
            }
        }
        while let Some(o) = open.pop() {
            match o {
                Open::Func(f) => out.push(Event::bare(EventKind::FunctionExit, f)),
                Open::Loop(l) => out.push(Event::bare(EventKind::LoopExit, l)),
            }
        }
        out.push(Event::bare(EventKind::ProgramEnd, PID));
        out
    }
}

/// Counts events of `kind` in a trace.
pub fn count_kind(events: &[Event], kind: EventKind) -> usize {
    events.iter().filter(|e| e.kind == kind).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{format_event, parse_trace_str};

    fn reparse(events: &[Event]) -> Vec<Event> {
        let text: String = events.iter().map(|e| format_event(e) + "\n").collect();
        parse_trace_str(&text).unwrap()
    }

    #[test]
    fn minimal_stride_loop() {
        let evs = SyntheticWorkload::new(WorkloadKind::StrideLoop, 1, 8, 8, 0).generate().unwrap();
        assert_eq!(evs.len(), 7);
        let stores: Vec<_> = evs.iter().filter(|e| e.kind == EventKind::Store).collect();
        let loads: Vec<_> = evs.iter().filter(|e| e.kind == EventKind::Load).collect();
        assert_eq!((stores.len(), loads.len()), (1, 1));
        assert_eq!(stores[0].address, loads[0].address);
        assert_eq!(stores[0].value, loads[0].value);
        assert_eq!(evs[2].kind, EventKind::LoopIter);
    }

    #[test]
    fn alloc_churn_pairs_within_iteration() {
        let evs = SyntheticWorkload::new(WorkloadKind::AllocChurn, 2, 256, 64, 3).generate().unwrap();
        assert_eq!(count_kind(&evs, EventKind::HeapAlloc), 2);
        assert_eq!(count_kind(&evs, EventKind::HeapFree), 2);
        let mut open_iter_alloc = None;
        for (i, e) in evs.iter().enumerate() {
            match e.kind {
                EventKind::LoopIter => assert!(open_iter_alloc.is_none()),
                EventKind::HeapAlloc => open_iter_alloc = Some(i),
                EventKind::HeapFree => open_iter_alloc = None,
                _ => {}
            }
        }
    }

    #[test]
    fn determinism_and_validity() {
        for kind in WorkloadKind::ALL {
            let w = SyntheticWorkload::with_iterations(kind, 500, 11);
            let a = w.generate().unwrap();
            assert_eq!(a, w.generate().unwrap());
            assert_eq!(reparse(&a), a);
            let other = SyntheticWorkload { seed: 12, ..w }.generate().unwrap();
            assert_eq!(a.len(), other.len(), "structure does not depend on the seed");
        }
        for seed in 0..50 {
            let t = RandomTrace {
                max_events: 400,
                ..RandomTrace::default()
            }
            .generate(seed);
            assert!(t.len() <= 400 + 16);
            assert_eq!(reparse(&t), t);
        }
    }

    #[test]
    fn param_errors() {
        assert_eq!("bogus".parse::<WorkloadKind>(), Err(WorkloadError::UnknownWorkload("bogus".into())));
        let w = SyntheticWorkload::new(WorkloadKind::StrideLoop, 0, 8, 8, 0);
        assert_eq!(w.generate(), Err(WorkloadError::ZeroIterations));
        let w = SyntheticWorkload::new(WorkloadKind::StrideLoop, 1, 4, 8, 0);
        assert!(matches!(w.generate(), Err(WorkloadError::BadParams(_))));
    }

    #[test]
    fn stride_loop_pointer_creates() {
        let evs = SyntheticWorkload::new(WorkloadKind::StrideLoop, 1000, 4096, 8, 0).generate().unwrap();
        assert_eq!(count_kind(&evs, EventKind::PointerCreate), 250);
    }
}
