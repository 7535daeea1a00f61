//! Objective-agnostic relaxation: bound each softmax output coordinate separately,
//! then contract the per-coordinate bounds with the direction.
//!
//! This is the classical interval softmax. It is sound but ignores that the outputs
//! sum to one, so it is never tighter than the exact threshold solver.

use serde::{Deserialize, Serialize};

use crate::certified::{sub_enclosure, CertifiedBound};
use crate::error::Result;
use crate::interval::Interval;
use crate::solver::{self, ScoreBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxOutputBox {
    pub a_lo: Vec<f64>,
    pub a_hi: Vec<f64>,
}

/// `log(sum_{r != j} e^{x_r})` for every `j`, or `-inf` when the sum is empty.
fn log_sum_exp_excluding(x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|v| (v - top).exp()).collect();
    // prefix/suffix sums avoid cancellation in `total - w_j`
    let mut pre = vec![0.0; k + 1];
    for j in 0..k {
        pre[j + 1] = pre[j] + w[j];
    }
    let mut suf = vec![0.0; k + 1];
    for j in (0..k).rev() {
        suf[j] = suf[j + 1] + w[j];
    }
    (0..k)
        .map(|j| {
            let rest = pre[j] + suf[j + 1];
            if rest > 0.0 {
                rest.ln() + top
            } else if k == 1 {
                f64::NEG_INFINITY
            } else {
                // every other weight underflowed relative to `top`: rescale them alone
                let others: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .filter(|&(r, _)| r != j)
                    .map(|(_, &v)| v)
                    .collect();
                let m = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + others.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            }
        })
        .collect()
}

// 1 / (1 + e^{t}), saturating cleanly at both ends.
fn logistic_of_neg(t: f64) -> f64 {
    if t == f64::NEG_INFINITY {
        1.0
    } else {
        (1.0 / (1.0 + t.exp())).clamp(0.0, 1.0)
    }
}

/// Per-coordinate softmax output bounds over the score box.
///
/// `a_lo[j] = e^{l_j} / (e^{l_j} + sum_{r != j} e^{u_r})` and symmetrically for
/// `a_hi`, evaluated in log-sum-exp form.
pub fn softmax_output_box(bx: &ScoreBox) -> SoftmaxOutputBox {
    let rest_hi = log_sum_exp_excluding(bx.u());
    let rest_lo = log_sum_exp_excluding(bx.ell());
    let a_lo = bx
        .ell()
        .iter()
        .zip(&rest_hi)
        .map(|(&l, &r)| logistic_of_neg(r - l))
        .collect();
    let a_hi = bx
        .u()
        .iter()
        .zip(&rest_lo)
        .map(|(&u, &r)| logistic_of_neg(r - u))
        .collect();
    SoftmaxOutputBox { a_lo, a_hi }
}

/// Contraction of [`softmax_output_box`] with `c`: each coefficient takes the
/// output bound that minimizes its own term.
pub fn baseline_directional_min(c: &[f64], bx: &ScoreBox) -> Result<f64> {
    solver::validate_direction(c, bx.len())?;
    let out = softmax_output_box(bx);
    Ok(c.iter()
        .zip(out.a_lo.iter().zip(&out.a_hi))
        .map(|(&cj, (&lo, &hi))| if cj >= 0.0 { cj * lo } else { cj * hi })
        .sum())
}

/// Outward-rounded evaluation of [`baseline_directional_min`].
///
/// Each output bound is enclosed in interval arithmetic; an output whose
/// denominator enclosure reaches zero falls back to the trivial bound `[0, 1]`.
pub fn certified_baseline_directional_min(c: &[f64], bx: &ScoreBox) -> Result<CertifiedBound> {
    let float_value = baseline_directional_min(c, bx)?;
    let k = c.len();
    let a = solver::stability_shift(bx.u());
    let lo_w: Vec<Interval> = bx.ell().iter().map(|&v| sub_enclosure(v, a).exp()).collect();
    let hi_w: Vec<Interval> = bx.u().iter().map(|&v| sub_enclosure(v, a).exp()).collect();

    // sums of every weight except index j, from prefix and suffix partial sums
    let excluding = |w: &[Interval]| -> Vec<Interval> {
        let zero = Interval::point(0.0);
        let mut pre = vec![zero; k + 1];
        for j in 0..k {
            pre[j + 1] = pre[j] + w[j];
        }
        let mut suf = vec![zero; k + 1];
        for j in (0..k).rev() {
            suf[j] = suf[j + 1] + w[j];
        }
        (0..k).map(|j| pre[j] + suf[j + 1]).collect()
    };
    let rest_hi = excluding(&hi_w);
    let rest_lo = excluding(&lo_w);

    let mut total = Interval::point(0.0);
    let mut saturated = false;
    for j in 0..k {
        let a_j = if c[j] >= 0.0 {
            match lo_w[j].checked_div(lo_w[j] + rest_hi[j]) {
                Ok(q) => {
                    saturated |= q.is_saturated();
                    q.lo().clamp(0.0, 1.0)
                }
                Err(_) => 0.0,
            }
        } else {
            match hi_w[j].checked_div(hi_w[j] + rest_lo[j]) {
                Ok(q) => {
                    saturated |= q.is_saturated();
                    q.hi().clamp(0.0, 1.0)
                }
                Err(_) => 1.0,
            }
        };
        total = total + Interval::point(c[j]) * Interval::point(a_j);
    }
    saturated |= total.is_saturated();
    Ok(CertifiedBound {
        lower: total.lo(),
        float_value,
        saturated,
    })
}
