//! Event-driven dynamic program profiling.
//!
//! A trace frontend specializes instrumentation events to what an analysis
//! asks for and streams them through a broadcast queue to backend workers.
//! Each worker tracks calling and loop contexts, partitions memory by address
//! and feeds an analysis module; results are merged into a sorted text
//! profile.

pub mod backend;
pub mod event;
pub mod ht;
pub mod oracle;
pub mod pipeline;
pub mod profilers;
pub mod queue;
pub mod trace;
pub mod workload;

pub use backend::{owner_of, ContextId, ContextManager, Module, Profile, Shard};
pub use event::{Arg, Event, EventKind, EventSpec};
pub use ht::{Aggregate, Flavor, HtMap, HtSet};
pub use pipeline::{profile_events, ProfileRun};
pub use profilers::ModuleConfig;
