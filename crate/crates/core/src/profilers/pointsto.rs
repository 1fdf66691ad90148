//! Points-to profiler.
//!
//! A shadow maps every byte of a live object to the static id of the
//! allocation that produced it. Each `ptr_create` looks up its target address
//! and adds the owning static id (or `UNKNOWN`) to the set of the creating
//! instruction. Allocations and frees are broadcast; a worker only writes the
//! shadow bytes whose granules it owns and only sees pointer creations into
//! those granules.

use rustc_hash::FxHashMap;

use crate::backend::{BackendError, ContextManager, Module, Route, Shard, ShadowMemory};
use crate::event::{Arg, Event, EventKind, EventSpec};
use crate::ht::{Flavor, HtConfig, HtMap};

use super::with_context_events;

/// Set element for pointers into no known object.
pub const UNKNOWN_OBJECT: u64 = u64::MAX;

pub const DEFAULT_SET_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointsToConfig {
    /// Largest set kept per instruction; `None` is unbounded.
    pub set_limit: Option<usize>,
}

impl Default for PointsToConfig {
    fn default() -> Self {
        PointsToConfig {
            set_limit: Some(DEFAULT_SET_LIMIT),
        }
    }
}

pub fn event_spec() -> EventSpec {
    let mut spec = EventSpec::new("pointsto");
    for k in [EventKind::HeapAlloc, EventKind::StackAlloc, EventKind::GlobalInit] {
        spec = spec.with(k, &[Arg::Address, Arg::Size]);
    }
    for k in [EventKind::HeapFree, EventKind::StackFree] {
        spec = spec.with(k, &[Arg::Address]);
    }
    with_context_events(spec.with(EventKind::PointerCreate, &[Arg::Address]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[repr(C)]
struct ObjectCell {
    instr: u32,
    ctx: u32,
    valid: u32,
    _pad: u32,
}

fn pack(instr: u32, ctx: u32) -> u64 {
    (instr as u64) << 32 | ctx as u64
}

/// Renders one set element.
pub fn format_object(v: u64) -> String {
    if v == UNKNOWN_OBJECT {
        "UNKNOWN".to_string()
    } else {
        format!("{}:{}", v >> 32, v as u32)
    }
}

pub struct PointsTo {
    shard: Shard,
    shadow: ShadowMemory<ObjectCell>,
    sizes: FxHashMap<u64, u64>,
    sets: HtMap<u32>,
}

impl PointsTo {
    pub fn new(cfg: PointsToConfig, shard: Shard) -> Self {
        PointsTo {
            shard,
            shadow: ShadowMemory::new(),
            sizes: FxHashMap::default(),
            sets: HtMap::with_config(
                Flavor::Set { limit: cfg.set_limit },
                HtConfig::for_workers(shard.num_workers),
            ),
        }
    }

    /// Applies `f` to each maximal run of owned bytes in `[addr, addr + len)`.
    fn owned_runs(&self, addr: u64, len: u64, mut f: impl FnMut(u64, u64)) {
        if len == 0 {
            return;
        }
        let end = addr.saturating_add(len);
        let g = 1u64 << self.shard.granule_shift;
        let mut a = addr;
        while a < end {
            let next = ((a >> self.shard.granule_shift) + 1).saturating_mul(g).min(end);
            if self.shard.owns_addr(a) {
                f(a, next - a);
            }
            if next == a {
                break;
            }
            a = next;
        }
    }
}

impl Module for PointsTo {
    fn name(&self) -> &str {
        "pointsto"
    }

    fn event_spec(&self) -> EventSpec {
        event_spec()
    }

    fn route(&self, ev: &Event) -> Route {
        match ev.kind {
            EventKind::PointerCreate => Route::Key(self.shard.granule(ev.address)),
            k if k.is_allocation() || k.is_deallocation() => Route::All,
            _ => Route::Skip,
        }
    }

    fn on_event(&mut self, ev: &Event, cx: &ContextManager) {
        match ev.kind {
            EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit => {
                let cell = ObjectCell {
                    instr: ev.primary_id,
                    ctx: cx.encode().0,
                    valid: 1,
                    _pad: 0,
                };
                let size = ev.size as u64;
                self.sizes.insert(ev.address, size);
                let mut runs = Vec::new();
                self.owned_runs(ev.address, size, |a, n| runs.push((a, n)));
                for (a, n) in runs {
                    self.shadow.fill(a, n, cell);
                }
            }
            EventKind::HeapFree | EventKind::StackFree => {
                if let Some(size) = self.sizes.remove(&ev.address) {
                    let mut runs = Vec::new();
                    self.owned_runs(ev.address, size, |a, n| runs.push((a, n)));
                    for (a, n) in runs {
                        self.shadow.clear(a, n);
                    }
                }
            }
            EventKind::PointerCreate => {
                let cell = self.shadow.get(ev.address);
                let target = if cell.valid != 0 {
                    pack(cell.instr, cell.ctx)
                } else {
                    UNKNOWN_OBJECT
                };
                self.sets.insert(ev.primary_id, target);
            }
            _ => {}
        }
    }

    fn merge(&mut self, other: Self) -> Result<(), BackendError> {
        self.sets
            .merge(other.sets)
            .map_err(|e| BackendError::Module(e.to_string()))
    }

    fn finalize(mut self, _: &ContextManager) -> Vec<String> {
        self.sets
            .snapshot()
            .into_iter()
            .filter_map(|(instr, a)| match a {
                crate::ht::Aggregate::Set(s) => {
                    let elems: Vec<String> = s.values.iter().map(|&v| format_object(v)).collect();
                    let mut line = format!("ptsto {instr} {}", elems.join(","));
                    if s.saturated {
                        line.push_str(" sat");
                    }
                    Some(line)
                }
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EventKind::*;

    fn run(cfg: PointsToConfig, workers: usize, events: &[Event]) -> Vec<String> {
        let mut cx = ContextManager::new();
        let mut mods: Vec<PointsTo> = (0..workers).map(|t| PointsTo::new(cfg.clone(), Shard::new(t, workers))).collect();
        for ev in events {
            cx.apply(ev).unwrap();
            for m in &mut mods {
                let mine = match m.route(ev) {
                    Route::All => true,
                    Route::Key(k) => m.shard.owns_key(k),
                    Route::Skip => false,
                };
                if mine {
                    m.on_event(ev, &cx);
                }
            }
        }
        let mut it = mods.into_iter();
        let mut head = it.next().unwrap();
        for m in it {
            head.merge(m).unwrap();
        }
        head.finalize(&cx)
    }

    #[test]
    fn resolves_targets() {
        let evs = [
            Event::alloc(GlobalInit, 1, 0x8000, 256),
            Event::bare(FunctionEntry, 5),
            Event::alloc(HeapAlloc, 2, 0x100, 300),
            Event::pointer_create(9, 0x100 + 299, 0),
            Event::pointer_create(9, 0x8000 + 200, 0),
            Event::free(HeapFree, 3, 0x100),
            Event::pointer_create(9, 0x150, 0),
            Event::pointer_create(8, 0x150, 0),
        ];
        for w in [1, 3] {
            assert_eq!(
                run(PointsToConfig::default(), w, &evs),
                vec!["ptsto 8 UNKNOWN", "ptsto 9 1:0,2:1,UNKNOWN"]
            );
        }
        let cfg = PointsToConfig { set_limit: Some(2) };
        assert_eq!(run(cfg, 2, &evs), vec!["ptsto 8 UNKNOWN", "ptsto 9 1:0,2:1 sat"]);
    }
}
