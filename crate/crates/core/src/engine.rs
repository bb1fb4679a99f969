//! Discrete-event kernel: simulated clock, cancellable event queue and the
//! seeded random streams every other module draws from.
//!
//! Time is kept as an integer number of microseconds so that event ordering,
//! trace output and metric recomputation are exact.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// A point (or span) on the simulated time axis, in whole microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    /// Rounds to the nearest microsecond; negative and NaN inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if secs.is_nan() || secs <= 0.0 {
            return SimTime::ZERO;
        }
        let us = (secs * 1e6).round();
        if us >= u64::MAX as f64 {
            SimTime::MAX
        } else {
            SimTime(us as u64)
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    /// Parses the `<s>.<us>` form produced by `Display`.
    pub fn parse(text: &str) -> Option<SimTime> {
        let (secs, frac) = match text.split_once('.') {
            Some((s, f)) => (s, f),
            None => (text, ""),
        };
        if secs.is_empty() || frac.len() > 6 {
            return None;
        }
        let secs: u64 = secs.parse().ok()?;
        let mut us: u64 = 0;
        if !frac.is_empty() {
            if !frac.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            us = frac.parse().ok()?;
            us *= 10u64.pow(6 - frac.len() as u32);
        }
        secs.checked_mul(1_000_000)?.checked_add(us).map(SimTime)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("past event: fire time {at} is before the current clock {now}")]
    PastEvent { at: SimTime, now: SimTime },
    #[error("cannot run backwards: target {target} is before the current clock {now}")]
    Backwards { target: SimTime, now: SimTime },
}

/// Opaque ticket returned by [`Scheduler::schedule`], used for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

/// Priority queue of timestamped events with FIFO tie-breaking.
///
/// Cancelled events are removed from the payload table immediately and their
/// heap entries are skipped lazily when they surface.
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, E>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler { now: SimTime::ZERO, next_seq: 0, heap: BinaryHeap::new(), pending: HashMap::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events still waiting to fire.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<EventHandle, EngineError> {
        if at < self.now {
            return Err(EngineError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.pending.insert(seq, event);
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` after the current clock; never fails.
    pub fn schedule_in(&mut self, delay: SimTime, event: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, event).expect("relative schedule is never in the past")
    }

    /// Returns true when the event was still pending and has now been removed.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&handle.0).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains_key(&handle.0)
    }

    /// Fire time of the earliest live event.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse((at, seq))) = self.heap.peek().copied() {
            if self.pending.contains_key(&seq) {
                return Some(at);
            }
            self.heap.pop();
        }
        None
    }

    /// Removes and returns the next event firing at or before `t_end`,
    /// advancing the clock to its fire time.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<(SimTime, E)> {
        while let Some(Reverse((at, seq))) = self.heap.peek().copied() {
            if at > t_end {
                return None;
            }
            self.heap.pop();
            if let Some(event) = self.pending.remove(&seq) {
                debug_assert!(at >= self.now);
                self.now = at;
                return Some((at, event));
            }
        }
        None
    }

    /// Moves the clock forward to `t` without dispatching anything.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), EngineError> {
        if t < self.now {
            return Err(EngineError::Backwards { target: t, now: self.now });
        }
        self.now = t;
        Ok(())
    }

    /// Dispatches every event with fire time `<= t_end` in order, then sets
    /// the clock to `t_end`. Handlers may schedule or cancel further events.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<usize, EngineError>
    where
        F: FnMut(&mut Self, SimTime, E),
    {
        if t_end < self.now {
            return Err(EngineError::Backwards { target: t_end, now: self.now });
        }
        let mut dispatched = 0;
        while let Some((at, event)) = self.pop_until(t_end) {
            handler(self, at, event);
            dispatched += 1;
        }
        self.now = t_end;
        Ok(dispatched)
    }
}

/// Seeded random stream (ChaCha8).
///
/// Sub-streams are derived from the master seed and a fixed label only, so a
/// module drawing more or fewer numbers never shifts another module's draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

pub const RNG_ALGORITHM: &str = "chacha8";

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, label: &str) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
