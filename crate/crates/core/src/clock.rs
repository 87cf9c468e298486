//! Millisecond clocks for stage and end-to-end timing.

use std::collections::VecDeque;
use std::time::Instant;

pub trait Clock {
    /// Milliseconds since an arbitrary fixed origin; never decreases.
    fn now_ms(&mut self) -> f64;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ms(&mut self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }
}

/// Always reads zero. For targets without a monotonic clock (wasm32).
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_ms(&mut self) -> f64 {
        0.0
    }
}

/// Replays fixed timestamps; reads past the end repeat the last one.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClock {
    ticks: VecDeque<f64>,
    last: f64,
}

impl ScriptedClock {
    pub fn new(ticks: impl IntoIterator<Item = f64>) -> Self {
        Self {
            ticks: ticks.into_iter().collect(),
            last: 0.0,
        }
    }

    /// Timestamps for a harness that reads the clock once before and once
    /// after each frame: frame `i` then measures exactly `latencies[i]`.
    pub fn from_latencies(latencies: &[f64]) -> Self {
        let mut t = 0.0;
        let mut ticks = Vec::with_capacity(latencies.len() * 2);
        for &l in latencies {
            ticks.push(t);
            t += l;
            ticks.push(t);
            t += 1.0;
        }
        Self::new(ticks)
    }
}

impl Clock for ScriptedClock {
    fn now_ms(&mut self) -> f64 {
        if let Some(t) = self.ticks.pop_front() {
            self.last = t;
        }
        self.last
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_pairs() {
        let mut c = ScriptedClock::from_latencies(&[10.0, 2.5]);
        let a = c.now_ms();
        let b = c.now_ms();
        assert_eq!(b - a, 10.0);
        let a = c.now_ms();
        let b = c.now_ms();
        assert_eq!(b - a, 2.5);
        assert_eq!(c.now_ms(), b);
    }

    #[test]
    fn monotonic_never_decreases() {
        let mut c = MonotonicClock::new();
        let mut prev = c.now_ms();
        for _ in 0..1000 {
            let t = c.now_ms();
            assert!(t >= prev);
            prev = t;
        }
    }
}
