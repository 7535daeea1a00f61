//! Proof-producing evaluation of the threshold sweep.
//!
//! The same `K + 1` candidates as [`crate::solver::directional_min`] are evaluated in
//! outward-rounded interval arithmetic. Each candidate's numerator and denominator
//! are enclosed, divided, and the smallest lower endpoint is returned. The result is
//! a lower bound on the exact real minimum regardless of floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;
use crate::solver::{self, ScoreBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBound {
    /// Conservative lower bound on the exact minimum.
    pub lower: f64,
    /// Value returned by the floating-point sweep on the same instance.
    pub float_value: f64,
    /// Some enclosure overflowed; `lower` must not be used as a certificate.
    pub saturated: bool,
}

impl CertifiedBound {
    /// Lower bound usable for certification, or [`Error::Saturated`].
    pub fn certificate(&self) -> Result<f64> {
        if self.saturated {
            Err(Error::Saturated)
        } else {
            Ok(self.lower)
        }
    }
}

/// Enclosure of `x - a` for floats `x` and `a`.
pub(crate) fn sub_enclosure(x: f64, a: f64) -> Interval {
    let d = x - a;
    if !d.is_finite() {
        // |x - a| > f64::MAX only for inputs near the overflow threshold.
        return Interval::point(if d > 0.0 { f64::MAX } else { -f64::MAX });
    }
    // TwoSum recovers the exact rounding error of `x + (-a)`.
    let b = -a;
    let bv = d - x;
    let err = (x - (d - bv)) + (b - bv);
    if err == 0.0 {
        Interval::point(d)
    } else {
        Interval::around(d)
    }
}

/// Interval-certified lower bound on `min_{s in box} c^T softmax(s)`.
pub fn certified_directional_min(c: &[f64], bx: &ScoreBox) -> Result<CertifiedBound> {
    solver::validate_direction(c, bx.len())?;
    let float_value = solver::threshold_min_unchecked(c, bx.ell(), bx.u()).value;

    let k = c.len();
    let order = solver::sorted_order(c);
    let a = solver::stability_shift(bx.u());
    let c_min = c[order[0]];

    let mut saturated = false;
    let lo_w: Vec<Interval> = order
        .iter()
        .map(|&j| sub_enclosure(bx.ell()[j], a).exp())
        .collect();
    let hi_w: Vec<Interval> = order
        .iter()
        .map(|&j| sub_enclosure(bx.u()[j], a).exp())
        .collect();

    let zero = Interval::point(0.0);
    let mut pre_d = Vec::with_capacity(k + 1);
    let mut pre_n = Vec::with_capacity(k + 1);
    pre_d.push(zero);
    pre_n.push(zero);
    for (pos, &j) in order.iter().enumerate() {
        let w = hi_w[pos];
        pre_d.push(pre_d[pos] + w);
        pre_n.push(pre_n[pos] + Interval::point(c[j]) * w);
    }
    let mut suf_d = vec![zero; k + 1];
    let mut suf_n = vec![zero; k + 1];
    for pos in (0..k).rev() {
        let j = order[pos];
        let w = lo_w[pos];
        suf_d[pos] = suf_d[pos + 1] + w;
        suf_n[pos] = suf_n[pos + 1] + Interval::point(c[j]) * w;
    }

    let mut lower = f64::INFINITY;
    for m in 0..=k {
        let num = pre_n[m] + suf_n[m];
        let den = pre_d[m] + suf_d[m];
        saturated |= num.is_saturated() || den.is_saturated();
        // Every threshold value is a convex combination of c, hence >= min(c); use that
        // when the denominator enclosure reaches zero through underflow.
        let tau_lo = match num.checked_div(den) {
            Ok(q) => q.lo().max(c_min),
            Err(Error::NonPositiveDivisor { .. }) => c_min,
            Err(e) => return Err(e),
        };
        lower = lower.min(tau_lo);
    }

    Ok(CertifiedBound {
        lower,
        float_value,
        saturated,
    })
}
