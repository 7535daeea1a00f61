//! Outward-rounded interval arithmetic.
//!
//! Directed rounding is realized by nudging every computed endpoint one unit in the
//! last place away from the enclosed set (two units for `exp`, whose platform
//! implementation is not guaranteed to be correctly rounded). The result of every
//! operation therefore encloses the exact real result set of its operands.
//!
//! Endpoints that overflow are clamped to `±f64::MAX` and the interval is marked
//! *saturated*. Saturated intervals remain valid as plain numbers but must not be
//! used to certify anything; the flag propagates through all operations.

use std::fmt;
use std::ops::{Add, Mul};

use crate::error::{Error, Result};

/// Padding applied to both endpoints of `exp`, in ulps.
pub const EXP_PAD_ULPS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
    saturated: bool,
}

#[inline]
fn down(x: f64, ulps: u32) -> f64 {
    let mut y = x;
    for _ in 0..ulps {
        y = y.next_down();
    }
    y
}

#[inline]
fn up(x: f64, ulps: u32) -> f64 {
    let mut y = x;
    for _ in 0..ulps {
        y = y.next_up();
    }
    y
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok(Self {
            lo,
            hi,
            saturated: false,
        })
    }

    /// Degenerate interval `[x, x]`. Panics on non-finite `x`.
    pub fn point(x: f64) -> Self {
        assert!(x.is_finite(), "Interval::point requires a finite value");
        Self {
            lo: x,
            hi: x,
            saturated: false,
        }
    }

    /// Interval around the rounding error of a single rounded operation whose
    /// nearest-rounded result is `x`.
    pub fn around(x: f64) -> Self {
        Self::from_rounded(x, x, false)
    }

    // Clamp overflowed endpoints and pad outward by one ulp.
    fn from_rounded(lo: f64, hi: f64, saturated: bool) -> Self {
        Self::from_rounded_pad(lo, hi, saturated, 1)
    }

    fn from_rounded_pad(lo: f64, hi: f64, mut saturated: bool, ulps: u32) -> Self {
        let mut lo = down(lo, ulps);
        let mut hi = up(hi, ulps);
        if !(lo.is_finite() && hi.is_finite()) {
            saturated = true;
            lo = if lo.is_nan() { -f64::MAX } else { lo.clamp(-f64::MAX, f64::MAX) };
            hi = if hi.is_nan() { f64::MAX } else { hi.clamp(-f64::MAX, f64::MAX) };
        }
        Self { lo, hi, saturated }
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Enclosure of `{e^t : t in self}`.
    pub fn exp(self) -> Self {
        let lo = down(self.lo.exp(), EXP_PAD_ULPS).clamp(0.0, f64::MAX);
        let hi = up(self.hi.exp(), EXP_PAD_ULPS);
        if hi.is_finite() {
            Self { lo, hi, saturated: self.saturated }
        } else {
            Self { lo, hi: f64::MAX, saturated: true }
        }
    }

    /// Enclosure of the quotient set. The divisor must be strictly positive.
    pub fn checked_div(self, rhs: Interval) -> Result<Self> {
        if !(rhs.lo > 0.0) {
            return Err(Error::NonPositiveDivisor { lo: rhs.lo });
        }
        let q = [
            self.lo / rhs.lo,
            self.lo / rhs.hi,
            self.hi / rhs.lo,
            self.hi / rhs.hi,
        ];
        let (lo, hi) = min_max(&q);
        Ok(Self::from_rounded(lo, hi, self.saturated || rhs.saturated))
    }

    pub fn neg(self) -> Self {
        Self {
            lo: -self.hi,
            hi: -self.lo,
            saturated: self.saturated,
        }
    }

    /// Enclosure of `min(x_1, ..., x_n)` over the operand intervals.
    pub fn min_of<I: IntoIterator<Item = Interval>>(items: I) -> Option<Self> {
        items.into_iter().reduce(|a, b| Self {
            lo: a.lo.min(b.lo),
            hi: a.hi.min(b.hi),
            saturated: a.saturated || b.saturated,
        })
    }
}

fn min_max(xs: &[f64; 4]) -> (f64, f64) {
    let mut lo = xs[0];
    let mut hi = xs[0];
    for &x in &xs[1..] {
        // NaN only arises from 0 * inf, which cannot happen with finite endpoints.
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo, hi)
}

impl Add for Interval {
    type Output = Interval;

    fn add(self, rhs: Interval) -> Interval {
        Interval::from_rounded(
            self.lo + rhs.lo,
            self.hi + rhs.hi,
            self.saturated || rhs.saturated,
        )
    }
}

impl Mul for Interval {
    type Output = Interval;

    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        let (lo, hi) = min_max(&p);
        Interval::from_rounded(lo, hi, self.saturated || rhs.saturated)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:e}, {:e}]", self.lo, self.hi)?;
        if self.saturated {
            write!(f, " (saturated)")?;
        }
        Ok(())
    }
}

pub fn iv_exp(x: Interval) -> Interval {
    x.exp()
}

pub fn iv_add(a: Interval, b: Interval) -> Interval {
    a + b
}

pub fn iv_mul(a: Interval, b: Interval) -> Interval {
    a * b
}

pub fn iv_div(a: Interval, b: Interval) -> Result<Interval> {
    a.checked_div(b)
}
