//! Encoded-image cache keyed by content hash, LRU-bounded with idle expiry.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use tap_core::candle_core::Tensor;

#[derive(Clone)]
pub struct Entry {
    pub grid: Tensor,
    pub width: usize,
    pub height: usize,
}

struct Slot {
    entry: Entry,
    last_used: Instant,
}

pub struct SessionCache {
    slots: HashMap<String, Slot>,
    capacity: usize,
    ttl: Duration,
}

/// Outcome of a lookup.
pub enum Lookup {
    Hit(Entry),
    Expired,
    Missing,
}

impl SessionCache {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        Self {
            slots: HashMap::new(),
            capacity: capacity.max(1),
            ttl,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&mut self, id: &str, now: Instant) -> Lookup {
        match self.slots.get_mut(id) {
            None => Lookup::Missing,
            Some(s) if now.duration_since(s.last_used) > self.ttl => {
                self.slots.remove(id);
                Lookup::Expired
            }
            Some(s) => {
                s.last_used = now;
                Lookup::Hit(s.entry.clone())
            }
        }
    }

    pub fn insert(&mut self, id: String, entry: Entry, now: Instant) {
        let ttl = self.ttl;
        self.slots.retain(|_, s| now.duration_since(s.last_used) <= ttl);
        while self.slots.len() >= self.capacity && !self.slots.contains_key(&id) {
            let oldest = self
                .slots
                .iter()
                .min_by_key(|(_, s)| s.last_used)
                .map(|(k, _)| k.clone())
                .expect("non-empty cache");
            self.slots.remove(&oldest);
        }
        self.slots.insert(id, Slot { entry, last_used: now });
    }
}
