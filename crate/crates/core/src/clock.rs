//! Time sources. Pipeline code never reads the wall clock directly so tests
//! can script every timestamp.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Instant;

pub trait Clock: Send + Sync {
    /// Seconds since an arbitrary fixed origin; never decreases.
    fn now(&self) -> f64;
}

#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Returns a scripted sequence of readings, then keeps repeating the last.
#[derive(Debug)]
pub struct ScriptedClock {
    readings: Mutex<(VecDeque<f64>, f64)>,
}

impl ScriptedClock {
    pub fn new(readings: impl IntoIterator<Item = f64>) -> Self {
        Self { readings: Mutex::new((readings.into_iter().collect(), 0.0)) }
    }

    pub fn remaining(&self) -> usize {
        self.readings.lock().expect("clock lock").0.len()
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> f64 {
        let mut guard = self.readings.lock().expect("clock lock");
        let (queue, last) = &mut *guard;
        if let Some(t) = queue.pop_front() {
            *last = t;
        }
        *last
    }
}

/// A clock advanced by hand.
#[derive(Debug, Default)]
pub struct ManualClock {
    t: Mutex<f64>,
}

impl ManualClock {
    pub fn new(start: f64) -> Self {
        Self { t: Mutex::new(start) }
    }

    pub fn set(&self, t: f64) {
        *self.t.lock().expect("clock lock") = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.t.lock().expect("clock lock") += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.t.lock().expect("clock lock")
    }
}
