//! Memory dependence profiler.
//!
//! Two shadows hold the last store and last load of every byte. A load forms
//! a flow dependence with the last store; with `all_types`, a store also forms
//! an anti dependence with the last load since the previous store and an
//! output dependence with the last store. Each byte involved counts as one
//! manifestation. When the two accesses share an invocation of a target loop,
//! the dependence is attributed to the innermost such loop and marked
//! loop-carried or loop-independent by comparing iterations.

use std::fmt;

use crate::backend::{
    BackendError, ContextManager, LoopFilter, LoopPoint, Module, Route, Shard, ShadowMemory,
};
use crate::event::{Arg, Event, EventKind, EventSpec};
use crate::ht::{Flavor, HtConfig, HtMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DepType {
    Flow,
    Anti,
    Output,
}

impl DepType {
    pub fn name(self) -> &'static str {
        match self {
            DepType::Flow => "flow",
            DepType::Anti => "anti",
            DepType::Output => "output",
        }
    }
}

impl fmt::Display for DepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepConfig {
    /// Report manifestation counts.
    pub count: bool,
    /// Track anti and output dependences, not just flow.
    pub all_types: bool,
    /// Report min/max iteration distance of loop dependences.
    pub distance: bool,
    /// Key dependences by the calling contexts of both accesses.
    pub context: bool,
    /// Loops dependences are attributed to.
    pub loops: LoopFilter,
}

impl Default for DepConfig {
    fn default() -> Self {
        DepConfig {
            count: false,
            all_types: false,
            distance: false,
            context: false,
            loops: LoopFilter::All,
        }
    }
}

impl DepConfig {
    /// Parses a comma-separated subset of `count,all-types,distance,context`.
    pub fn with_flags(mut self, flags: &str) -> Result<Self, String> {
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "count" => self.count = true,
                "all-types" | "all_types" => self.all_types = true,
                "distance" => self.distance = true,
                "context" => self.context = true,
                other => return Err(format!("unknown memdep flag `{other}`")),
            }
        }
        Ok(self)
    }

    fn tracks_loops(&self) -> bool {
        self.distance || !self.loops.is_none()
    }
}

pub fn event_spec(cfg: &DepConfig) -> EventSpec {
    let mut spec = EventSpec::new("memdep")
        .with(EventKind::Load, &[Arg::Address])
        .with(EventKind::Store, &[Arg::Address]);
    if cfg.tracks_loops() || cfg.context {
        spec = spec
            .with(EventKind::LoopInvoke, &[])
            .with(EventKind::LoopIter, &[])
            .with(EventKind::LoopExit, &[]);
    }
    if cfg.context {
        spec = spec
            .with(EventKind::FunctionEntry, &[])
            .with(EventKind::FunctionExit, &[]);
    }
    spec
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[repr(C)]
struct AccessCell {
    instr: u32,
    ctx: u32,
    point: u32,
    valid: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DepKey {
    pub dep: DepType,
    pub src: u32,
    pub dst: u32,
    pub loop_id: Option<u32>,
    pub carried: Option<bool>,
    pub src_ctx: Option<u32>,
    pub dst_ctx: Option<u32>,
}

pub struct MemDep {
    cfg: DepConfig,
    shard: Shard,
    stores: ShadowMemory<AccessCell>,
    loads: ShadowMemory<AccessCell>,
    counts: HtMap<DepKey>,
    min_distance: HtMap<DepKey>,
    max_distance: HtMap<DepKey>,
}

impl MemDep {
    pub fn new(cfg: DepConfig, shard: Shard) -> Self {
        let ht = HtConfig::for_workers(shard.num_workers);
        MemDep {
            cfg,
            shard,
            stores: ShadowMemory::new(),
            loads: ShadowMemory::new(),
            counts: HtMap::with_config(Flavor::Count, ht),
            min_distance: HtMap::with_config(Flavor::Min, ht),
            max_distance: HtMap::with_config(Flavor::Max, ht),
        }
    }

    /// Bytes held by both shadows.
    pub fn shadow_bytes(&self) -> usize {
        self.stores.resident_bytes() + self.loads.resident_bytes()
    }

    /// Shadow pages allocated by both shadows.
    pub fn shadow_pages(&self) -> usize {
        self.stores.page_count() + self.loads.page_count()
    }

    /// Metadata bytes per application byte, over both shadows.
    pub fn shadow_ratio(&self) -> usize {
        self.stores.record_bytes() + self.loads.record_bytes()
    }

    /// Application bytes covered by one shadow page.
    pub fn shadow_page_bytes(&self) -> usize {
        1 << self.stores.page_shift()
    }

    /// Directory bytes of both shadows.
    pub fn shadow_directory_bytes(&self) -> usize {
        self.stores.directory_bytes() + self.loads.directory_bytes()
    }

    fn record(&mut self, dep: DepType, src: AccessCell, dst: AccessCell, cx: &ContextManager) {
        let mut key = DepKey {
            dep,
            src: src.instr,
            dst: dst.instr,
            loop_id: None,
            carried: None,
            src_ctx: None,
            dst_ctx: None,
        };
        if self.cfg.context {
            key.src_ctx = Some(src.ctx);
            key.dst_ctx = Some(dst.ctx);
        }
        let mut distance = None;
        if self.cfg.tracks_loops() {
            if let Some(s) = cx.shared_loop(LoopPoint(src.point), LoopPoint(dst.point), &self.cfg.loops) {
                key.loop_id = Some(s.loop_id);
                key.carried = Some(s.src_iteration != s.dst_iteration);
                distance = Some(s.dst_iteration - s.src_iteration);
            }
        }
        self.counts.insert(key, 1);
        if self.cfg.distance {
            if let Some(d) = distance {
                self.min_distance.insert(key, d);
                self.max_distance.insert(key, d);
            }
        }
    }

    fn access(&mut self, ev: &Event, cx: &ContextManager) {
        let cur = AccessCell {
            instr: ev.primary_id,
            ctx: cx.encode().0,
            point: cx.loop_point().0,
            valid: 1,
        };
        let size = ev.size.max(1) as u64;
        for i in 0..size {
            let b = ev.address.wrapping_add(i);
            if !self.shard.owns_addr(b) {
                continue;
            }
            if ev.kind == EventKind::Load {
                let st = self.stores.get(b);
                if st.valid != 0 {
                    self.record(DepType::Flow, st, cur, cx);
                }
                if self.cfg.all_types {
                    self.loads.set(b, cur);
                }
            } else {
                if self.cfg.all_types {
                    let ld = self.loads.get(b);
                    if ld.valid != 0 {
                        self.record(DepType::Anti, ld, cur, cx);
                        self.loads.set(b, AccessCell::default());
                    }
                    let st = self.stores.get(b);
                    if st.valid != 0 {
                        self.record(DepType::Output, st, cur, cx);
                    }
                }
                self.stores.set(b, cur);
            }
        }
    }
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl Module for MemDep {
    fn name(&self) -> &str {
        "memdep"
    }

    fn event_spec(&self) -> EventSpec {
        event_spec(&self.cfg)
    }

    fn route(&self, ev: &Event) -> Route {
        match ev.kind {
            EventKind::Load | EventKind::Store => self.shard.route_range(ev.address, ev.size as u64),
            _ => Route::Skip,
        }
    }

    fn on_event(&mut self, ev: &Event, cx: &ContextManager) {
        self.access(ev, cx);
    }

    fn merge(&mut self, other: Self) -> Result<(), BackendError> {
        let e = |e: crate::ht::HtError| BackendError::Module(e.to_string());
        self.counts.merge(other.counts).map_err(e)?;
        self.min_distance.merge(other.min_distance).map_err(e)?;
        self.max_distance.merge(other.max_distance).map_err(e)?;
        Ok(())
    }

    fn finalize(mut self, _: &ContextManager) -> Vec<String> {
        let mins: std::collections::HashMap<DepKey, u64> = self
            .min_distance
            .snapshot()
            .into_iter()
            .filter_map(|(k, a)| a.scalar().map(|v| (k, v)))
            .collect();
        let maxs: std::collections::HashMap<DepKey, u64> = self
            .max_distance
            .snapshot()
            .into_iter()
            .filter_map(|(k, a)| a.scalar().map(|v| (k, v)))
            .collect();
        self.counts
            .snapshot()
            .into_iter()
            .map(|(k, a)| {
                let mut line = format!(
                    "dep {} {} {} {} {} {} {} {}",
                    k.dep,
                    k.src,
                    k.dst,
                    opt(k.loop_id),
                    opt(k.carried.map(|c| if c { "LC" } else { "LI" })),
                    opt(self.cfg.count.then(|| a.scalar().unwrap_or(0))),
                    opt(mins.get(&k)),
                    opt(maxs.get(&k)),
                );
                if let (Some(s), Some(d)) = (k.src_ctx, k.dst_ctx) {
                    line.push_str(&format!(" {s} {d}"));
                }
                line
            })
            .collect()
    }
}
