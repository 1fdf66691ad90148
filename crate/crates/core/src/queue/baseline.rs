//! A naive broadcast queue guarded by a single mutex, taken once per event on
//! each side. It exists as a throughput baseline for the ping-pong queue.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};

struct State {
    lanes: Vec<VecDeque<u64>>,
    closed: bool,
}

struct Shared {
    state: Mutex<State>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
}

pub struct LockedQueue;

impl LockedQueue {
    /// Bounded to `capacity_words` per consumer lane.
    pub fn create(capacity_words: usize, consumers: usize) -> (LockedSender, Vec<LockedReceiver>) {
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                lanes: (0..consumers).map(|_| VecDeque::new()).collect(),
                closed: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity: capacity_words.max(2),
        });
        let receivers = (0..consumers)
            .map(|lane| LockedReceiver {
                shared: shared.clone(),
                lane,
            })
            .collect();
        (LockedSender { shared }, receivers)
    }
}

pub struct LockedSender {
    shared: Arc<Shared>,
}

impl LockedSender {
    /// Pushes one event (a length-prefixed word run) to every lane.
    pub fn send(&self, words: &[u64]) {
        let need = words.len() + 1;
        let mut st = self.shared.state.lock().unwrap();
        while st.lanes.iter().any(|l| l.len() + need > self.shared.capacity) {
            st = self.shared.not_full.wait(st).unwrap();
        }
        for lane in &mut st.lanes {
            lane.push_back(words.len() as u64);
            lane.extend(words.iter().copied());
        }
        drop(st);
        self.shared.not_empty.notify_all();
    }

    pub fn close(&self) {
        self.shared.state.lock().unwrap().closed = true;
        self.shared.not_empty.notify_all();
    }
}

impl Drop for LockedSender {
    fn drop(&mut self) {
        self.close();
    }
}

pub struct LockedReceiver {
    shared: Arc<Shared>,
    lane: usize,
}

impl LockedReceiver {
    /// Pops one event into `out`; returns false once closed and drained.
    pub fn recv(&self, out: &mut Vec<u64>) -> bool {
        out.clear();
        let mut st = self.shared.state.lock().unwrap();
        loop {
            let lane = &mut st.lanes[self.lane];
            if let Some(n) = lane.pop_front() {
                out.extend(lane.drain(..n as usize));
                drop(st);
                self.shared.not_full.notify_one();
                return true;
            }
            if st.closed {
                return false;
            }
            st = self.shared.not_empty.wait(st).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_in_order() {
        let (tx, rxs) = LockedQueue::create(16, 2);
        let handles: Vec<_> = rxs
            .into_iter()
            .map(|rx| {
                std::thread::spawn(move || {
                    let mut out = Vec::new();
                    let mut all = Vec::new();
                    while rx.recv(&mut out) {
                        all.extend_from_slice(&out);
                    }
                    all
                })
            })
            .collect();
        for i in 0..1000u64 {
            tx.send(&[i, i + 1]);
        }
        tx.close();
        let expected: Vec<u64> = (0..1000u64).flat_map(|i| [i, i + 1]).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    }
}
