//! Virtual time used by the simulator and the manager.

use core::fmt;
use core::ops::{Add, AddAssign, Sub};

/// A point (or span) on the virtual clock, counted in nanoseconds.
///
/// Integer nanoseconds keep sums exact, so two runs that differ only by a
/// fixed network delay differ by exactly that delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_ms(ms: f64) -> Self {
        if ms <= 0.0 {
            return VirtualTime::ZERO;
        }
        // Round half up; `f64::round` is not available without std.
        VirtualTime((ms * 1_000_000.0 + 0.5) as u64)
    }

    pub fn from_ms_int(ms: u64) -> Self {
        VirtualTime(ms * 1_000_000)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_sub(other.0))
    }
}

impl Add for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 + rhs.0)
    }
}

impl AddAssign for VirtualTime {
    fn add_assign(&mut self, rhs: VirtualTime) {
        self.0 += rhs.0;
    }
}

impl Sub for VirtualTime {
    type Output = VirtualTime;
    fn sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 - rhs.0)
    }
}

/// Formats as milliseconds with microsecond precision, e.g. `250.000`.
impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let micros = self.0 / 1_000;
        write!(f, "{}.{:03}", micros / 1_000, micros % 1_000)
    }
}
