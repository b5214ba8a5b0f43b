//! Injectable time and identity sources.

use std::sync::atomic::{AtomicI64, Ordering};

use sha2::{Digest, Sha256};

use crate::value::{ItemId, Timestamp};

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Always returns the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub Timestamp);

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        self.0
    }
}

/// Advances by a fixed step on every reading.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicI64,
    step_ms: i64,
}

impl SteppingClock {
    pub fn new(start: Timestamp, step_ms: i64) -> Self {
        SteppingClock { next: AtomicI64::new(start.millis()), step_ms }
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.next.fetch_add(self.step_ms, Ordering::SeqCst))
    }
}

/// Source of fresh Item identifiers. `next_seq` is the sequence number the
/// next event will receive, which lets deterministic sources stay stable
/// across store reopenings.
pub trait IdSource: Send {
    fn next_id(&mut self, next_seq: u64) -> ItemId;
}

#[derive(Debug, Default)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&mut self, _next_seq: u64) -> ItemId {
        ItemId::random()
    }
}

/// Version-4 shaped identifiers derived from `(seed, next_seq, n)`, where `n`
/// counts draws made while the same event is pending.
#[derive(Debug)]
pub struct SeededIds {
    seed: u64,
    seq: u64,
    drawn: u64,
}

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        SeededIds { seed, seq: 0, drawn: 0 }
    }
}

impl IdSource for SeededIds {
    fn next_id(&mut self, next_seq: u64) -> ItemId {
        if next_seq != self.seq {
            self.seq = next_seq;
            self.drawn = 0;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(next_seq.to_le_bytes());
        h.update(self.drawn.to_le_bytes());
        self.drawn += 1;
        let digest = h.finalize();
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        ItemId::from_random_bytes(bytes)
    }
}
