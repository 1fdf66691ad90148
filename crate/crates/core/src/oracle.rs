//! Single-threaded reference implementation of all four profilers.
//!
//! It shares no machinery with the backend: no queue, no shadow memory, no
//! context trie and no loop-point tree. Contexts are numbered by looking up
//! whole frame stacks; loop membership is decided by checking event indices
//! against invocation spans; dependences come from scanning per-byte access
//! histories. It is slow and only meant for traces of up to a million events.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::backend::{LoopFilter, Profile};
use crate::event::{Event, EventKind};
use crate::profilers::{DepConfig, ModuleConfig};

pub const MAX_ORACLE_EVENTS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("trace has {0} events; the oracle handles at most {MAX_ORACLE_EVENTS}")]
    TooLarge(usize),
    #[error("event {index}: {reason}")]
    BadNesting { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Frame {
    Func(u32),
    Inv(u32),
    Iter(u32),
}

#[derive(Debug)]
struct Span {
    loop_id: u32,
    start: usize,
    end: usize,
    /// Event index at which each iteration begins.
    iter_starts: Vec<usize>,
    saw_iter: bool,
}

impl Span {
    fn contains(&self, i: usize) -> bool {
        self.start < i && i < self.end
    }

    fn iteration_at(&self, i: usize) -> u64 {
        (self.iter_starts.partition_point(|&s| s <= i) - 1) as u64
    }
}

/// Context and loop structure of a whole trace.
struct Timeline {
    ctx: Vec<u32>,
    /// Index into `nests` for each event.
    nest: Vec<usize>,
    /// Distinct stacks of active spans, outermost first.
    nests: Vec<Vec<usize>>,
    spans: Vec<Span>,
}

impl Timeline {
    fn build(events: &[Event]) -> Result<Timeline, OracleError> {
        let mut ids: HashMap<Vec<Frame>, u32> = HashMap::new();
        let mut stack: Vec<Frame> = Vec::new();
        ids.insert(Vec::new(), 0);
        let mut open: Vec<usize> = Vec::new();
        let mut spans: Vec<Span> = Vec::new();
        let mut nests = vec![Vec::new()];
        let mut tl = Timeline {
            ctx: Vec::with_capacity(events.len()),
            nest: Vec::with_capacity(events.len()),
            nests: Vec::new(),
            spans: Vec::new(),
        };
        for (i, ev) in events.iter().enumerate() {
            let bad = |reason: &str| OracleError::BadNesting {
                index: i,
                reason: reason.to_string(),
            };
            let id = ev.primary_id;
            let mut nest_changed = false;
            match ev.kind {
                EventKind::FunctionEntry => stack.push(Frame::Func(id)),
                EventKind::FunctionExit => {
                    if stack.pop() != Some(Frame::Func(id)) {
                        return Err(bad("function exit does not match"));
                    }
                }
                EventKind::LoopInvoke => {
                    stack.push(Frame::Inv(id));
                    open.push(spans.len());
                    spans.push(Span {
                        loop_id: id,
                        start: i,
                        end: usize::MAX,
                        iter_starts: vec![i],
                        saw_iter: false,
                    });
                    nest_changed = true;
                }
                EventKind::LoopIter => {
                    let span = match open.last() {
                        Some(&s) if spans[s].loop_id == id => &mut spans[s],
                        _ => return Err(bad("loop_iter outside its loop")),
                    };
                    if span.saw_iter {
                        span.iter_starts.push(i);
                    } else {
                        span.saw_iter = true;
                        stack.push(Frame::Iter(id));
                    }
                }
                EventKind::LoopExit => {
                    if stack.last() == Some(&Frame::Iter(id)) {
                        stack.pop();
                    }
                    if stack.pop() != Some(Frame::Inv(id)) {
                        return Err(bad("loop exit does not match"));
                    }
                    let s = open.pop().expect("open span for an invocation frame");
                    spans[s].end = i;
                    nest_changed = true;
                }
                _ => {}
            }
            let next = ids.len() as u32;
            let ctx = *ids.entry(stack.clone()).or_insert(next);
            if nest_changed {
                nests.push(open.clone());
            }
            tl.ctx.push(ctx);
            tl.nest.push(nests.len() - 1);
        }
        tl.nests = nests;
        tl.spans = spans;
        Ok(tl)
    }

    /// Spans active at event `i`, innermost first, restricted to targets.
    fn active<'a>(&'a self, i: usize, filter: &'a LoopFilter) -> impl Iterator<Item = usize> + 'a {
        self.nests[self.nest[i]]
            .iter()
            .rev()
            .copied()
            .filter(move |&s| filter.accepts(self.spans[s].loop_id))
    }

    /// Innermost target span containing both events, with their iterations.
    fn shared(&self, src: usize, dst: usize, filter: &LoopFilter) -> Option<(u32, u64, u64)> {
        self.active(dst, filter)
            .find(|&s| self.spans[s].contains(src))
            .map(|s| {
                let sp = &self.spans[s];
                (sp.loop_id, sp.iteration_at(src), sp.iteration_at(dst))
            })
    }
}

/// Computes the profile `cfg` would produce for `events`; `workers` is only
/// echoed in the header.
pub fn oracle_profile(events: &[Event], cfg: &ModuleConfig, workers: usize) -> Result<Profile, OracleError> {
    if events.len() > MAX_ORACLE_EVENTS {
        return Err(OracleError::TooLarge(events.len()));
    }
    let tl = Timeline::build(events)?;
    let records = match cfg {
        ModuleConfig::MemDep(c) => memdep(events, &tl, c),
        ModuleConfig::ValuePattern => valuepattern(events),
        ModuleConfig::Lifetime(c) => lifetime(events, &tl, &c.loops),
        ModuleConfig::PointsTo(c) => pointsto(events, &tl, c.set_limit),
    };
    Ok(Profile::new(cfg.name(), workers, records))
}

#[derive(Clone, Copy)]
struct Access {
    store: bool,
    instr: u32,
    index: usize,
}

fn memdep(events: &[Event], tl: &Timeline, cfg: &DepConfig) -> Vec<String> {
    let loops = cfg.distance || !cfg.loops.is_none();
    // (type, src, dst, loop, carried, sctx, dctx) -> (count, min, max)
    type Key = (&'static str, u32, u32, Option<u32>, Option<bool>, Option<u32>, Option<u32>);
    let mut deps: BTreeMap<Key, (u64, u64, u64)> = BTreeMap::new();
    let mut history: HashMap<u64, Vec<Access>> = HashMap::new();

    let mut add = |ty: &'static str, src: Access, dst: Access| {
        let attributed = if loops { tl.shared(src.index, dst.index, &cfg.loops) } else { None };
        let key = (
            ty,
            src.instr,
            dst.instr,
            attributed.map(|a| a.0),
            attributed.map(|a| a.1 != a.2),
            cfg.context.then(|| tl.ctx[src.index]),
            cfg.context.then(|| tl.ctx[dst.index]),
        );
        let d = attributed.map_or(0, |a| a.2 - a.1);
        let e = deps.entry(key).or_insert((0, u64::MAX, 0));
        e.0 += 1;
        e.1 = e.1.min(d);
        e.2 = e.2.max(d);
    };

    for (i, ev) in events.iter().enumerate() {
        let store = match ev.kind {
            EventKind::Load => false,
            EventKind::Store => true,
            _ => continue,
        };
        let me = Access {
            store,
            instr: ev.primary_id,
            index: i,
        };
        for b in 0..ev.size.max(1) as u64 {
            let h = history.entry(ev.address.wrapping_add(b)).or_default();
            let last_store = h.iter().rev().find(|a| a.store).copied();
            if !store {
                if let Some(s) = last_store {
                    add("flow", s, me);
                }
            } else if cfg.all_types {
                let last_load = h.iter().rev().take_while(|a| !a.store).next().copied();
                if let Some(l) = last_load {
                    add("anti", l, me);
                }
                if let Some(s) = last_store {
                    add("output", s, me);
                }
            }
            h.push(me);
        }
    }

    let dash = |s: Option<String>| s.unwrap_or_else(|| "-".into());
    deps.into_iter()
        .map(|((ty, src, dst, lp, carried, sctx, dctx), (count, min, max))| {
            let dist = cfg.distance && lp.is_some();
            let mut line = format!(
                "dep {ty} {src} {dst} {} {} {} {} {}",
                dash(lp.map(|l| l.to_string())),
                dash(carried.map(|c| if c { "LC".into() } else { "LI".into() })),
                dash(cfg.count.then(|| count.to_string())),
                dash(dist.then(|| min.to_string())),
                dash(dist.then(|| max.to_string())),
            );
            if let (Some(s), Some(d)) = (sctx, dctx) {
                line += &format!(" {s} {d}");
            }
            line
        })
        .collect()
}

fn valuepattern(events: &[Event]) -> Vec<String> {
    let mut seen: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for ev in events.iter().filter(|e| e.kind == EventKind::Load) {
        seen.entry(ev.primary_id).or_default().push(ev.value);
    }
    seen.into_iter()
        .filter(|(_, vals)| vals.iter().all(|&v| v == vals[0]))
        .map(|(instr, vals)| format!("constload {instr} {:x}", vals[0]))
        .collect()
}

struct Object {
    instr: u32,
    ctx: u32,
    base: u64,
    size: u64,
    alloc: usize,
    free: Option<usize>,
}

/// All allocations of the trace, with frees matched to the newest
/// allocation at the same base that is still live.
fn objects(events: &[Event], tl: &Timeline, with_globals: bool) -> Vec<Object> {
    let mut objs: Vec<Object> = Vec::new();
    let mut by_base: HashMap<u64, usize> = HashMap::new();
    for (i, ev) in events.iter().enumerate() {
        let k = ev.kind;
        if k.is_allocation() && (with_globals || k != EventKind::GlobalInit) {
            by_base.insert(ev.address, objs.len());
            objs.push(Object {
                instr: ev.primary_id,
                ctx: tl.ctx[i],
                base: ev.address,
                size: ev.size as u64,
                alloc: i,
                free: None,
            });
        } else if k.is_deallocation() {
            if let Some(o) = by_base.remove(&ev.address) {
                objs[o].free = Some(i);
            }
        }
    }
    objs
}

fn lifetime(events: &[Event], tl: &Timeline, filter: &LoopFilter) -> Vec<String> {
    let mut widest: BTreeMap<(u32, u32), u8> = BTreeMap::new();
    for o in objects(events, tl, false) {
        let class = match (tl.active(o.alloc, filter).next(), o.free) {
            (Some(s), Some(f)) if tl.spans[s].contains(f) => {
                let sp = &tl.spans[s];
                if sp.iteration_at(o.alloc) == sp.iteration_at(f) {
                    0
                } else {
                    1
                }
            }
            _ => 2,
        };
        let w = widest.entry((o.instr, o.ctx)).or_insert(0);
        *w = (*w).max(class);
    }
    const NAMES: [&str; 3] = ["iter-local", "inv-local", "escaping"];
    widest
        .into_iter()
        .map(|((instr, ctx), c)| format!("objlife {instr} {ctx} {}", NAMES[c as usize]))
        .collect()
}

fn pointsto(events: &[Event], tl: &Timeline, limit: Option<usize>) -> Vec<String> {
    let objs = objects(events, tl, true);
    let mut sets: BTreeMap<u32, Vec<Option<(u32, u32)>>> = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        if ev.kind != EventKind::PointerCreate {
            continue;
        }
        let a = ev.address;
        let newest = objs
            .iter()
            .filter(|o| o.alloc < i && o.base <= a && a - o.base < o.size)
            .max_by_key(|o| o.alloc);
        let target = match newest {
            Some(o) if o.free.map_or(true, |f| f > i) => Some((o.instr, o.ctx)),
            _ => None,
        };
        let set = sets.entry(ev.primary_id).or_default();
        if !set.contains(&target) {
            set.push(target);
        }
    }
    sets.into_iter()
        .map(|(instr, mut set)| {
            // Known objects ascending by (instr, ctx), UNKNOWN last.
            set.sort_by_key(|t| t.map_or((1, 0, 0), |(a, c)| (0, a, c)));
            let sat = limit.is_some_and(|l| set.len() > l);
            if let Some(l) = limit {
                set.truncate(l);
            }
            let elems: Vec<String> = set
                .iter()
                .map(|t| t.map_or_else(|| "UNKNOWN".to_string(), |(a, c)| format!("{a}:{c}")))
                .collect();
            format!("ptsto {instr} {}{}", elems.join(","), if sat { " sat" } else { "" })
        })
        .collect()
}
