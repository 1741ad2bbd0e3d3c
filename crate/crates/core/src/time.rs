//! Integer microsecond timestamps and the two clock sources.
//!
//! Every timestamp in the runtime is a [`Micros`] value: microseconds since
//! the session epoch. Local fabrics read a monotonic wall clock, simulated
//! fabrics advance a virtual clock from their discrete-event loop. Keeping
//! both as integers lets the analytics partition core-time exactly.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Microseconds since the session epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Micros(pub i64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    /// Rounds `secs` to the nearest microsecond.
    pub fn from_secs_f64(secs: f64) -> Self {
        Micros((secs * 1e6).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn max(self, other: Micros) -> Micros {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn min(self, other: Micros) -> Micros {
        if self <= other {
            self
        } else {
            other
        }
    }

    /// Parses the `seconds.micros` decimal form written by [`fmt::Display`].
    pub fn parse_decimal(text: &str) -> Option<Micros> {
        let text = text.trim();
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let (whole, frac) = match body.split_once('.') {
            Some((w, f)) => (w, f),
            None => (body, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return None;
        }
        if !whole.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
        let mut frac_us: i64 = 0;
        for (i, b) in frac.bytes().enumerate() {
            if i >= 6 {
                // beyond microsecond precision: round half up on the 7th digit
                if i == 6 && b >= b'5' {
                    frac_us += 1;
                }
                break;
            }
            frac_us = frac_us * 10 + i64::from(b - b'0');
        }
        for _ in frac.len()..6 {
            frac_us *= 10;
        }
        let value = whole.checked_mul(1_000_000)?.checked_add(frac_us)?;
        Some(Micros(if neg { -value } else { value }))
    }
}

impl fmt::Display for Micros {
    /// Decimal seconds with exactly six fractional digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{}{}.{:06}", sign, abs / 1_000_000, abs % 1_000_000)
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

/// A shareable clock handle.
#[derive(Debug, Clone)]
pub enum Clock {
    /// Monotonic wall clock relative to a shared epoch.
    Wall(Instant),
    /// Virtual seconds, advanced explicitly by a simulation loop.
    Virtual(Arc<AtomicI64>),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn virtual_clock() -> Self {
        Clock::Virtual(Arc::new(AtomicI64::new(0)))
    }

    pub fn now(&self) -> Micros {
        match self {
            Clock::Wall(epoch) => Micros(epoch.elapsed().as_micros() as i64),
            Clock::Virtual(t) => Micros(t.load(Ordering::Acquire)),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    /// Moves a virtual clock forward to `t`; never moves it backwards.
    /// No-op on wall clocks.
    pub fn advance_to(&self, t: Micros) {
        if let Clock::Virtual(v) = self {
            v.fetch_max(t.0, Ordering::AcqRel);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_has_microsecond_precision() {
        assert_eq!(Micros(2_000_000).to_string(), "2.000000");
        assert_eq!(Micros(1).to_string(), "0.000001");
        assert_eq!(Micros(-1_500_000).to_string(), "-1.500000");
    }

    #[test]
    fn parse_decimal_round_trips() {
        for v in [0i64, 1, 999_999, 1_000_000, 123_456_789, -42, -1_000_001] {
            let m = Micros(v);
            assert_eq!(Micros::parse_decimal(&m.to_string()), Some(m));
        }
        assert_eq!(Micros::parse_decimal("2"), Some(Micros(2_000_000)));
        assert_eq!(Micros::parse_decimal("0.5"), Some(Micros(500_000)));
        assert_eq!(Micros::parse_decimal("abc"), None);
        assert_eq!(Micros::parse_decimal(""), None);
    }

    #[test]
    fn virtual_clock_is_monotone() {
        let c = Clock::virtual_clock();
        c.advance_to(Micros(10));
        c.advance_to(Micros(5));
        assert_eq!(c.now(), Micros(10));
    }
}
