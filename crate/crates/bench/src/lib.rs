//! Shared inputs for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prompt_kit::event::encode_event;
use prompt_kit::workload::{SyntheticWorkload, WorkloadKind};
use prompt_kit::{Event, EventSpec};

/// A synthetic workload encoded under the full spec, one word slice per event.
pub struct EncodedTrace {
    pub words: Vec<u64>,
    pub bounds: Vec<usize>,
}

impl EncodedTrace {
    pub fn new(kind: WorkloadKind, iterations: u64) -> Self {
        let spec = EventSpec::full("bench");
        let events = SyntheticWorkload::with_iterations(kind, iterations, 1).generate().expect("valid workload");
        let mut words = Vec::new();
        let mut bounds = vec![0];
        for ev in &events {
            words.extend(encode_event(ev, &spec).expect("valid event"));
            bounds.push(words.len());
        }
        EncodedTrace { words, bounds }
    }

    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> impl Iterator<Item = &[u64]> {
        self.bounds.windows(2).map(|w| &self.words[w[0]..w[1]])
    }
}

pub fn workload(kind: WorkloadKind, iterations: u64) -> Vec<Event> {
    SyntheticWorkload::with_iterations(kind, iterations, 1).generate().expect("valid workload")
}

/// Uniform keys in `0..distinct` with random values.
pub fn key_values(n: usize, distinct: u64, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random_range(0..distinct), rng.random())).collect()
}

/// Word-aligned addresses inside a `footprint`-byte region.
pub fn addresses(n: usize, footprint: u64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| 0x10_0000 + (rng.random_range(0..footprint) & !7)).collect()
}
