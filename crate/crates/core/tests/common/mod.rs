#![allow(dead_code)]

use dashu::float::round::mode::HalfAway;
use dashu::float::{DBig, FBig};
use proptest::prelude::*;
use vertex_bounds::solver::ScoreBox;

/// Working precision of the decimal oracle, in significant digits.
pub const DIGITS: usize = 60;

pub fn dec(x: f64) -> DBig {
    // exact binary value first, then one rounding to DIGITS decimal digits
    FBig::<HalfAway, 2>::try_from(x)
        .expect("finite input")
        .with_base_and_precision::<10>(DIGITS)
        .value()
}

fn to_f64(x: &DBig) -> f64 {
    x.to_f64().value()
}

/// Enclosure `[lo, hi]` of the exact minimum of `c^T softmax(s)` over the box,
/// by enumerating every vertex in 60-digit decimal arithmetic.
///
/// The 60-digit evaluation is accurate to far below `f64` resolution; widening
/// the rounded result by one ulp on each side (plus a tiny absolute margin) gives
/// a valid enclosure.
pub fn decimal_min_enclosure(c: &[f64], bx: &ScoreBox) -> (f64, f64) {
    let k = c.len();
    assert!(k <= 16, "decimal oracle is exponential in K");
    let shift = dec(bx.u().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let cd: Vec<DBig> = c.iter().map(|&v| dec(v)).collect();
    let w_lo: Vec<DBig> = bx.ell().iter().map(|&v| (dec(v) - &shift).exp()).collect();
    let w_hi: Vec<DBig> = bx.u().iter().map(|&v| (dec(v) - &shift).exp()).collect();
    let mut best: Option<DBig> = None;
    for mask in 0u32..(1 << k) {
        let mut num = DBig::ZERO;
        let mut den = DBig::ZERO;
        for j in 0..k {
            let w = if mask >> j & 1 == 1 { &w_hi[j] } else { &w_lo[j] };
            num += &cd[j] * w;
            den += w;
        }
        let v = num / den;
        if best.as_ref().is_none_or(|b| v < *b) {
            best = Some(v);
        }
    }
    let v = to_f64(&best.expect("K >= 1"));
    let pad = 1e-300;
    ((v - pad).next_down(), (v + pad).next_up())
}

/// Random `(c, box)` with `K` in `k_range`, centers and coefficients in
/// `[-scale, scale]`, half-widths in `[0, width]`.
pub fn instance(
    k_range: std::ops::RangeInclusive<usize>,
    scale: f64,
    width: f64,
) -> impl Strategy<Value = (Vec<f64>, ScoreBox)> {
    k_range.prop_flat_map(move |k| {
        (
            prop::collection::vec(-scale..scale, k),
            prop::collection::vec(-scale..scale, k),
            prop::collection::vec(0.0..=width, k),
        )
            .prop_map(|(c, m, h)| {
                let ell = m.iter().zip(&h).map(|(a, b)| a - b).collect();
                let u = m.iter().zip(&h).map(|(a, b)| a + b).collect();
                (c, ScoreBox::new(ell, u).unwrap())
            })
    })
}
