//! End-to-end runs: replay a trace through the queue into backend workers.

use thiserror::Error;

use crate::backend::{run_backend, BackendError, Profile};
use crate::event::Event;
use crate::profilers::{Lifetime, MemDep, ModuleConfig, PointsTo, ValuePattern};
use crate::queue::{self, Consumer, QueueConfig, QueueError};
use crate::trace::{replay, ReplayCounts, ReplayError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileRun {
    pub profile: Profile,
    pub counts: ReplayCounts,
}

fn backend(cfg: &ModuleConfig, consumers: Vec<Consumer>) -> Result<Profile, BackendError> {
    let spec = cfg.event_spec();
    match cfg {
        ModuleConfig::MemDep(c) => run_backend(&spec, consumers, |s| MemDep::new(c.clone(), s)),
        ModuleConfig::ValuePattern => run_backend(&spec, consumers, ValuePattern::new),
        ModuleConfig::Lifetime(c) => run_backend(&spec, consumers, |s| Lifetime::new(c.clone(), s)),
        ModuleConfig::PointsTo(c) => run_backend(&spec, consumers, |s| PointsTo::new(c.clone(), s)),
    }
}

/// Streams `events`, specialized to the module's spec, through a queue with
/// `workers` consumers and returns the merged profile.
pub fn profile_events(
    events: &[Event],
    cfg: &ModuleConfig,
    workers: usize,
    buffer_bytes: usize,
) -> Result<ProfileRun, PipelineError> {
    let spec = cfg.event_spec();
    let (mut producer, consumers) = queue::create(QueueConfig::new(buffer_bytes, workers))?;
    let (counts, profile) = std::thread::scope(|s| {
        let frontend = s.spawn(|| replay(events, &spec, &mut producer));
        let profile = backend(cfg, consumers);
        (frontend.join().expect("frontend panicked"), profile)
    });
    let profile = profile?;
    Ok(ProfileRun {
        profile,
        counts: counts?,
    })
}
