//! Millisecond clocks for timestamps, latencies and budgets.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Wall-clock time. Readings are Unix milliseconds, advanced monotonically
/// from the moment the clock was created.
#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
    origin_unix_ms: u64,
}

impl SystemClock {
    pub fn new() -> Self {
        let origin_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        SystemClock { origin: Instant::now(), origin_unix_ms }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin_unix_ms + self.origin.elapsed().as_millis() as u64
    }
}

/// Deterministic clock: every reading advances by a fixed step.
///
/// Used for replayable runs, where event timestamps and reported latencies
/// must not depend on the machine. Deadlines are still enforced in real time.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicU64,
    step: u64,
}

impl LogicalClock {
    pub fn new(start: u64, step: u64) -> Self {
        LogicalClock { next: AtomicU64::new(start), step }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        LogicalClock::new(0, 1)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}
