//! Analyses built on the backend: memory dependences, constant loads, object
//! lifetimes and points-to sets.

pub mod lifetime;
pub mod memdep;
pub mod pointsto;
pub mod valuepattern;

use std::fmt;
use std::str::FromStr;

use crate::backend::LoopFilter;
use crate::event::{EventKind, EventSpec};

pub use lifetime::{Lifetime, LifetimeClass, LifetimeConfig};
pub use memdep::{DepConfig, DepType, MemDep};
pub use pointsto::{PointsTo, PointsToConfig, UNKNOWN_OBJECT};
pub use valuepattern::ValuePattern;

/// Adds all five context events to `spec`.
pub(crate) fn with_context_events(mut spec: EventSpec) -> EventSpec {
    for k in EventKind::CONTEXT {
        spec = spec.with(k, &[]);
    }
    spec
}

/// Selects one profiler and its options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleConfig {
    MemDep(DepConfig),
    ValuePattern,
    Lifetime(LifetimeConfig),
    PointsTo(PointsToConfig),
}

impl ModuleConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleConfig::MemDep(_) => "memdep",
            ModuleConfig::ValuePattern => "valuepattern",
            ModuleConfig::Lifetime(_) => "lifetime",
            ModuleConfig::PointsTo(_) => "pointsto",
        }
    }

    pub fn event_spec(&self) -> EventSpec {
        match self {
            ModuleConfig::MemDep(c) => memdep::event_spec(c),
            ModuleConfig::ValuePattern => valuepattern::event_spec(),
            ModuleConfig::Lifetime(_) => lifetime::event_spec(),
            ModuleConfig::PointsTo(_) => pointsto::event_spec(),
        }
    }
}

/// Error for unparseable `--loops` lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopListError(pub String);

impl fmt::Display for LoopListError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bad loop list `{}` (want all, none or comma-separated ids)", self.0)
    }
}

impl std::error::Error for LoopListError {}

/// Parses `all`, `none` or `1,2,3`.
pub fn parse_loop_filter(s: &str) -> Result<LoopFilter, LoopListError> {
    match s.trim() {
        "all" => Ok(LoopFilter::All),
        "none" | "" => Ok(LoopFilter::None),
        list => list
            .split(',')
            .map(|t| u32::from_str(t.trim()))
            .collect::<Result<Vec<_>, _>>()
            .map(LoopFilter::only)
            .map_err(|_| LoopListError(s.to_string())),
    }
}
