//! Object lifetime profiler.
//!
//! Each allocation is tagged with its static id (allocating instruction and
//! context) and the loop point at which it happened. When the object is freed
//! the loop point is compared with the current one, relative to the innermost
//! target loop active at allocation. A static id is reported with the widest
//! lifetime any of its instances had.

use std::fmt;

use rustc_hash::FxHashMap;

use crate::backend::{BackendError, ContextManager, LoopFilter, LoopPoint, Module, Route, Shard};
use crate::event::{Arg, Event, EventKind, EventSpec};
use crate::ht::{Flavor, HtConfig, HtMap};

use super::with_context_events;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LifetimeClass {
    IterationLocal = 0,
    InvocationLocal = 1,
    Escaping = 2,
}

impl LifetimeClass {
    pub fn name(self) -> &'static str {
        match self {
            LifetimeClass::IterationLocal => "iter-local",
            LifetimeClass::InvocationLocal => "inv-local",
            LifetimeClass::Escaping => "escaping",
        }
    }

    fn from_rank(r: u64) -> Self {
        match r {
            0 => LifetimeClass::IterationLocal,
            1 => LifetimeClass::InvocationLocal,
            _ => LifetimeClass::Escaping,
        }
    }
}

impl fmt::Display for LifetimeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LifetimeConfig {
    pub loops: LoopFilter,
}

pub fn event_spec() -> EventSpec {
    let mut spec = EventSpec::new("lifetime");
    for k in [EventKind::HeapAlloc, EventKind::StackAlloc] {
        spec = spec.with(k, &[Arg::Address, Arg::Size]);
    }
    for k in [EventKind::HeapFree, EventKind::StackFree] {
        spec = spec.with(k, &[Arg::Address]);
    }
    with_context_events(spec.with(EventKind::ProgramEnd, &[]))
}

#[derive(Debug, Clone, Copy)]
struct Instance {
    instr: u32,
    ctx: u32,
    point: LoopPoint,
}

pub struct Lifetime {
    cfg: LifetimeConfig,
    shard: Shard,
    live: FxHashMap<u64, Instance>,
    classes: HtMap<(u32, u32)>,
    unknown_frees: u64,
}

impl Lifetime {
    pub fn new(cfg: LifetimeConfig, shard: Shard) -> Self {
        Lifetime {
            cfg,
            shard,
            live: FxHashMap::default(),
            classes: HtMap::with_config(Flavor::Max, HtConfig::for_workers(shard.num_workers)),
            unknown_frees: 0,
        }
    }

    /// Frees that matched no live object on this worker.
    pub fn unknown_frees(&self) -> u64 {
        self.unknown_frees
    }

    fn classify(&self, inst: &Instance, cx: &ContextManager) -> LifetimeClass {
        let Some(at_alloc) = cx.innermost_loop(inst.point, &self.cfg.loops) else {
            return LifetimeClass::Escaping;
        };
        match cx
            .loop_levels(cx.loop_point())
            .find(|l| l.invocation == at_alloc.invocation)
        {
            Some(now) if now.iteration == at_alloc.iteration => LifetimeClass::IterationLocal,
            Some(_) => LifetimeClass::InvocationLocal,
            None => LifetimeClass::Escaping,
        }
    }

    fn note(&mut self, inst: Instance, class: LifetimeClass) {
        self.classes.insert((inst.instr, inst.ctx), class as u64);
    }
}

impl Module for Lifetime {
    fn name(&self) -> &str {
        "lifetime"
    }

    fn event_spec(&self) -> EventSpec {
        event_spec()
    }

    fn route(&self, ev: &Event) -> Route {
        match ev.kind {
            k if k.is_allocation() || k.is_deallocation() => Route::Key(self.shard.granule(ev.address)),
            EventKind::ProgramEnd => Route::All,
            _ => Route::Skip,
        }
    }

    fn on_event(&mut self, ev: &Event, cx: &ContextManager) {
        match ev.kind {
            EventKind::HeapAlloc | EventKind::StackAlloc => {
                let inst = Instance {
                    instr: ev.primary_id,
                    ctx: cx.encode().0,
                    point: cx.loop_point(),
                };
                if let Some(old) = self.live.insert(ev.address, inst) {
                    self.note(old, LifetimeClass::Escaping);
                }
            }
            EventKind::HeapFree | EventKind::StackFree => match self.live.remove(&ev.address) {
                Some(inst) => {
                    let class = self.classify(&inst, cx);
                    self.note(inst, class);
                }
                None => self.unknown_frees += 1,
            },
            EventKind::ProgramEnd => {
                let rest: Vec<Instance> = self.live.drain().map(|(_, i)| i).collect();
                for inst in rest {
                    self.note(inst, LifetimeClass::Escaping);
                }
            }
            _ => {}
        }
    }

    fn merge(&mut self, other: Self) -> Result<(), BackendError> {
        self.unknown_frees += other.unknown_frees;
        self.classes
            .merge(other.classes)
            .map_err(|e| BackendError::Module(e.to_string()))
    }

    fn finalize(mut self, _: &ContextManager) -> Vec<String> {
        self.classes
            .snapshot()
            .into_iter()
            .map(|((instr, ctx), a)| {
                let class = LifetimeClass::from_rank(a.scalar().unwrap_or(2));
                format!("objlife {instr} {ctx} {class}")
            })
            .collect()
    }
}
