// SPDX-License-Identifier: Apache-2.0

//! Virtual machine-mode timer and per-enclave runtime accounting.

use serde::{Deserialize, Serialize};

use crate::model::EnclaveRecord;

/// 10 MHz.
pub const DEFAULT_TICK_PERIOD_NS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualClock {
    ticks: u64,
    tick_period_ns: u64,
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new(DEFAULT_TICK_PERIOD_NS)
    }
}

impl VirtualClock {
    pub fn new(tick_period_ns: u64) -> Self {
        Self { ticks: 0, tick_period_ns }
    }

    /// Read-only view of the timer.
    pub fn rdtime(&self) -> u64 {
        self.ticks
    }

    pub fn advance(&mut self, delta: u64) -> u64 {
        self.ticks += delta;
        self.ticks
    }

    /// Moves the clock forward to `t`; never backwards.
    pub fn advance_to(&mut self, t: u64) -> u64 {
        if t > self.ticks {
            self.ticks = t;
        }
        self.ticks
    }

    pub fn tick_period_ns(&self) -> u64 {
        self.tick_period_ns
    }

    pub fn ticks_to_ns(&self, ticks: u64) -> u64 {
        ticks * self.tick_period_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextDirection {
    HostToEnclave,
    EnclaveToHost,
}

pub(crate) fn record_entry(rec: &mut EnclaveRecord, now: u64) {
    rec.t_e_entry = now;
    rec.entered = true;
}

pub(crate) fn record_exit(rec: &mut EnclaveRecord, now: u64) {
    rec.t_e += now.saturating_sub(rec.t_e_entry);
    rec.t_e_entry = now;
    rec.entered = false;
}

/// `t_E + (now − t_E_entry)` while entered, `t_E` otherwise.
pub(crate) fn local_time(rec: &EnclaveRecord, now: u64) -> u64 {
    if rec.entered {
        rec.t_e + now.saturating_sub(rec.t_e_entry)
    } else {
        rec.t_e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rdtime_and_advance() {
        let mut c = VirtualClock::default();
        assert_eq!(c.rdtime(), 0);
        assert_eq!(c.rdtime(), c.rdtime());
        assert_eq!(c.advance(0), 0);
        c.advance(5);
        assert_eq!(c.advance(7), 12);
        let mut a = VirtualClock::default();
        a.advance(3);
        a.advance(4);
        let mut b = VirtualClock::default();
        b.advance(7);
        assert_eq!(a, b);
    }

    #[test]
    fn advance_to_never_goes_back() {
        let mut c = VirtualClock::default();
        c.advance_to(50);
        assert_eq!(c.advance_to(20), 50);
        assert_eq!(c.ticks_to_ns(3), 300);
    }
}
