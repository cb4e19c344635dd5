use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Forward-pass purposes tracked separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Collection,
    Generation,
    Training,
}

/// Thread-safe forward-pass counters. Counts only ever increase.
#[derive(Debug, Default)]
pub struct Counters {
    collection: AtomicU64,
    generation: AtomicU64,
    training: AtomicU64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, purpose: Purpose, n: u64) {
        let slot = match purpose {
            Purpose::Collection => &self.collection,
            Purpose::Generation => &self.generation,
            Purpose::Training => &self.training,
        };
        slot.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            collection: self.collection.load(Ordering::Relaxed),
            generation: self.generation.load(Ordering::Relaxed),
            training: self.training.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub collection: u64,
    pub generation: u64,
    pub training: u64,
}

impl CounterSnapshot {
    pub fn total(&self) -> u64 {
        self.collection + self.generation + self.training
    }

    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            collection: self.collection - earlier.collection,
            generation: self.generation - earlier.generation,
            training: self.training - earlier.training,
        }
    }
}
