//! Finds load instructions that always read the same value.

use crate::backend::{BackendError, ContextManager, Module, Route, Shard};
use crate::event::{Arg, Event, EventKind, EventSpec};
use crate::ht::{Flavor, HtConfig, HtMap};

use super::with_context_events;

pub fn event_spec() -> EventSpec {
    with_context_events(
        EventSpec::new("valuepattern")
            .with(EventKind::Load, &[Arg::Value])
            .with(EventKind::ProgramEnd, &[]),
    )
}

pub struct ValuePattern {
    shard: Shard,
    values: HtMap<u32>,
}

impl ValuePattern {
    pub fn new(shard: Shard) -> Self {
        ValuePattern {
            shard,
            values: HtMap::with_config(Flavor::Constant, HtConfig::for_workers(shard.num_workers)),
        }
    }
}

impl Module for ValuePattern {
    fn name(&self) -> &str {
        "valuepattern"
    }

    fn event_spec(&self) -> EventSpec {
        event_spec()
    }

    fn route(&self, ev: &Event) -> Route {
        match ev.kind {
            EventKind::Load => Route::Key(ev.primary_id as u64),
            _ => Route::Skip,
        }
    }

    fn on_event(&mut self, ev: &Event, _: &ContextManager) {
        debug_assert!(self.shard.owns_key(ev.primary_id as u64));
        self.values.insert(ev.primary_id, ev.value);
    }

    fn merge(&mut self, other: Self) -> Result<(), BackendError> {
        self.values
            .merge(other.values)
            .map_err(|e| BackendError::Module(e.to_string()))
    }

    fn finalize(mut self, _: &ContextManager) -> Vec<String> {
        self.values
            .snapshot()
            .into_iter()
            .filter(|(_, a)| a.is_constant())
            .map(|(instr, a)| format!("constload {instr} {:x}", a.scalar().unwrap_or(0)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loads_only() {
        let cx = ContextManager::new();
        let mut m = ValuePattern::new(Shard::single());
        for (i, v) in [(1, 0xAB), (2, 3), (1, 0xAB), (2, 4)] {
            m.on_event(&Event::load(i, 0, v, 8), &cx);
        }
        assert_eq!(m.finalize(&cx), vec!["constload 1 ab"]);
    }
}
