//! Deterministic discrete-event engine.
//!
//! A virtual clock in integer microseconds and a priority queue of scheduled
//! entries. Entries dispatch in non-decreasing time order; ties break by
//! insertion sequence number, so two runs over the same schedule produce the
//! same dispatch order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use thiserror::Error;

/// Virtual time in integer microseconds since the simulation epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn us(self) -> u64 {
        self.0
    }

    pub fn add_us(self, delta: u64) -> SimTime {
        SimTime(self.0 + delta)
    }

    /// Saturating subtraction, in microseconds.
    pub fn sub_us(self, delta: u64) -> SimTime {
        SimTime(self.0.saturating_sub(delta))
    }

    pub fn delta_us(self, earlier: SimTime) -> u64 {
        self.0 - earlier.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    /// Scheduling before the current clock is a bug in the caller.
    #[error("time-travel: cannot schedule at {at} when clock is {clock}")]
    TimeTravel { at: SimTime, clock: SimTime },
}

/// Handle returned by [`Engine::schedule`]; permits cancellation before dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Handle(u64);

struct Entry<E> {
    at: SimTime,
    seq: u64,
    tag: &'static str,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// BinaryHeap is a max-heap; reverse so the earliest (time, seq) pops first.
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Discrete-event engine over an opaque payload type.
pub struct Engine<E> {
    clock: SimTime,
    queue: BinaryHeap<Entry<E>>,
    next_seq: u64,
    cancelled: HashSet<u64>,
    /// When enabled, records every dispatched (time, tag) pair.
    pub trace_log: Option<Vec<(SimTime, &'static str)>>,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            cancelled: HashSet::new(),
            trace_log: None,
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Enqueues an entry for dispatch at `at`. Rejects times before the clock.
    pub fn schedule(&mut self, at: SimTime, tag: &'static str, payload: E) -> Result<Handle, EngineError> {
        if at < self.clock {
            return Err(EngineError::TimeTravel { at, clock: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry { at, seq, tag, payload });
        Ok(Handle(seq))
    }

    /// Cancels a scheduled entry. Returns false if it already dispatched
    /// (or was cancelled before).
    pub fn cancel(&mut self, handle: Handle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Pops the next live entry with time <= end, advancing the clock to it.
    pub fn pop_until(&mut self, end: SimTime) -> Option<(SimTime, &'static str, E)> {
        while let Some(head) = self.queue.peek() {
            if head.at > end {
                break;
            }
            let entry = self.queue.pop().expect("peeked entry");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.at >= self.clock, "clock monotonicity");
            self.clock = entry.at;
            if let Some(log) = &mut self.trace_log {
                log.push((entry.at, entry.tag));
            }
            return Some((entry.at, entry.tag, entry.payload));
        }
        None
    }

    /// Dispatches every entry with time <= `end` through `handler` and leaves
    /// the clock at `end`. Entries scheduled by the handler are dispatched in
    /// the same pass when they fall within the window. Returns the dispatch
    /// count.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Engine<E>, SimTime, &'static str, E),
    {
        let mut dispatched = 0;
        while let Some((at, tag, payload)) = self.pop_until(end) {
            handler(self, at, tag, payload);
            dispatched += 1;
        }
        if end > self.clock {
            self.clock = end;
        }
        dispatched
    }
}
