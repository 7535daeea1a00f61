//! Exact directional optimization of `c^T softmax(s)` over a score box.
//!
//! The minimum over a product of intervals is attained at one of `K + 1` threshold
//! vertices: after sorting `c` ascending, the `m` cheapest coordinates sit at their
//! upper endpoint and the rest at their lower endpoint. [`directional_min`] evaluates
//! all of them with prefix/suffix sums in `O(K log K)`; [`exhaustive_vertex_min`]
//! enumerates every vertex and serves as the reference oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Largest dimension accepted by [`exhaustive_vertex_min`].
pub const MAX_EXHAUSTIVE_K: usize = 24;

/// Independent per-coordinate bounds `ell[j] <= s[j] <= u[j]` on one row of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBox {
    ell: Vec<f64>,
    u: Vec<f64>,
}

impl ScoreBox {
    pub fn new(ell: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        validate_box(&ell, &u)?;
        Ok(Self { ell, u })
    }

    /// Degenerate box `[s, s]`.
    pub fn point(s: Vec<f64>) -> Result<Self> {
        Self::new(s.clone(), s)
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn len(&self) -> usize {
        self.ell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ell.is_empty()
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.len() == self.len()
            && s.iter()
                .zip(self.ell.iter().zip(&self.u))
                .all(|(&x, (&l, &u))| l <= x && x <= u)
    }

    /// Returns a copy with every bound shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Result<Self> {
        Self::new(
            self.ell.iter().map(|l| l + delta).collect(),
            self.u.iter().map(|u| u + delta).collect(),
        )
    }
}

pub(crate) fn validate_box(ell: &[f64], u: &[f64]) -> Result<()> {
    if ell.is_empty() {
        return Err(Error::Empty("score box"));
    }
    if ell.len() != u.len() {
        return Err(Error::LengthMismatch {
            what: "score box upper bounds",
            expected: ell.len(),
            found: u.len(),
        });
    }
    for (j, (&l, &h)) in ell.iter().zip(u).enumerate() {
        if !l.is_finite() || !h.is_finite() {
            return Err(Error::InvalidBox {
                index: j,
                reason: "non-finite bound".into(),
            });
        }
        if l > h {
            return Err(Error::InvalidBox {
                index: j,
                reason: format!("lower bound {l} exceeds upper bound {h}"),
            });
        }
    }
    Ok(())
}

pub(crate) fn validate_direction(c: &[f64], k: usize) -> Result<()> {
    if c.len() != k {
        return Err(Error::LengthMismatch {
            what: "direction",
            expected: k,
            found: c.len(),
        });
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("direction"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Min,
    Max,
}

/// Optimum of a directional softmax problem together with its witness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub value: f64,
    /// Number of cheapest coordinates (in sorted order) placed at their upper bound.
    pub m: usize,
    /// Witness vertex in the original coordinate order.
    pub vertex: Vec<f64>,
    pub sense: Sense,
}

/// Shift-stable evaluation of `c^T softmax(s)`.
pub fn softmax_objective(c: &[f64], s: &[f64]) -> Result<f64> {
    if c.len() != s.len() {
        return Err(Error::LengthMismatch {
            what: "score vector",
            expected: c.len(),
            found: s.len(),
        });
    }
    if c.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    if s.iter().chain(c).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax objective input"));
    }
    Ok(objective_unchecked(c, s))
}

pub(crate) fn objective_unchecked(c: &[f64], s: &[f64]) -> f64 {
    let a = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&cj, &sj) in c.iter().zip(s) {
        let w = (sj - a).exp();
        num += cj * w;
        den += w;
    }
    clamp_to_range(num / den, c)
}

// A convex combination of `c` lies in [min c, max c]; rounding may step outside by an ulp.
fn clamp_to_range(v: f64, c: &[f64]) -> f64 {
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    v.clamp(lo, hi)
}

/// Indices of `c` sorted ascending; ties keep original index order.
pub(crate) fn sorted_order(c: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
    order
}

/// Shift used to keep every exponential in `(0, 1]`.
pub(crate) fn stability_shift(u: &[f64]) -> f64 {
    u.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Exact `min_{s in box} c^T softmax(s)` via the threshold sweep.
pub fn directional_min(c: &[f64], bx: &ScoreBox) -> Result<ThresholdResult> {
    validate_direction(c, bx.len())?;
    Ok(threshold_min_unchecked(c, &bx.ell, &bx.u))
}

/// Exact `max_{s in box} c^T softmax(s)`, computed as `-min(-c)`.
pub fn directional_max(c: &[f64], bx: &ScoreBox) -> Result<ThresholdResult> {
    validate_direction(c, bx.len())?;
    let neg: Vec<f64> = c.iter().map(|x| -x).collect();
    let mut r = threshold_min_unchecked(&neg, &bx.ell, &bx.u);
    r.value = -r.value;
    r.sense = Sense::Max;
    Ok(r)
}

/// Residual of the first-order identity `sum_j (c_j - rho) y_j = 0` at a vertex
/// `s` with value `rho`, where `y_j = e^{s_j - max s}`; normalized by `sum_j y_j`.
pub fn stationarity_residual(c: &[f64], s: &[f64], rho: f64) -> Result<f64> {
    softmax_objective(c, s)?;
    let a = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (&cj, &sj) in c.iter().zip(s) {
        let y = (sj - a).exp();
        num += (cj - rho) * y;
        den += y;
    }
    Ok(num.abs() / den)
}

/// Vertex with the `m` smallest-coefficient coordinates (sorted ascending, ties by
/// index) at their upper bound and the rest at their lower bound.
pub fn threshold_vertex(c: &[f64], bx: &ScoreBox, m: usize) -> Result<Vec<f64>> {
    validate_direction(c, bx.len())?;
    if m > c.len() {
        return Err(Error::InvalidArgument(format!("threshold index {m} exceeds K = {}", c.len())));
    }
    let mut v = bx.ell.clone();
    for &j in &sorted_order(c)[..m] {
        v[j] = bx.u[j];
    }
    Ok(v)
}

/// Solves many independent rows. Results match per-row [`directional_min`] calls.
pub fn directional_min_batch(
    rows: &[(Vec<f64>, ScoreBox)],
    exec: Exec,
) -> Result<Vec<ThresholdResult>> {
    exec.map(rows, |(c, bx)| directional_min(c, bx))
        .into_iter()
        .collect()
}

/// Running sum of `w_j = e^{x_j}` and `c_j w_j`, stored relative to the largest
/// exponent seen so far so that no partial sum underflows.
#[derive(Debug, Clone, Copy)]
struct ScaledSum {
    shift: f64,
    w: f64,
    cw: f64,
}

impl ScaledSum {
    const EMPTY: ScaledSum = ScaledSum {
        shift: f64::NEG_INFINITY,
        w: 0.0,
        cw: 0.0,
    };

    fn push(self, x: f64, c: f64) -> Self {
        if x <= self.shift {
            let w = (x - self.shift).exp();
            ScaledSum {
                shift: self.shift,
                w: self.w + w,
                cw: self.cw + c * w,
            }
        } else {
            let r = (self.shift - x).exp();
            ScaledSum {
                shift: x,
                w: self.w * r + 1.0,
                cw: self.cw * r + c,
            }
        }
    }

    /// `(sum c_j w_j) / (sum w_j)` over the union of two disjoint sums.
    fn ratio(self, other: ScaledSum) -> f64 {
        let top = self.shift.max(other.shift);
        let (a, b) = (scale(self.shift - top), scale(other.shift - top));
        (self.cw * a + other.cw * b) / (self.w * a + other.w * b)
    }
}

fn scale(d: f64) -> f64 {
    if d == f64::NEG_INFINITY {
        0.0
    } else {
        d.exp()
    }
}

/// Threshold sweep on already validated slices.
///
/// Equivalent to shifting every score by `max_j u_j` before exponentiating, except
/// that each prefix and suffix keeps its own shift, so candidates whose weights are
/// all far below the global maximum are still evaluated accurately.
pub(crate) fn threshold_min_unchecked(c: &[f64], ell: &[f64], u: &[f64]) -> ThresholdResult {
    let k = c.len();
    let order = sorted_order(c);

    // prefix[m]: the m cheapest coordinates at their upper endpoint
    let mut prefix = Vec::with_capacity(k + 1);
    prefix.push(ScaledSum::EMPTY);
    for &j in &order {
        let next = prefix[prefix.len() - 1].push(u[j], c[j]);
        prefix.push(next);
    }
    // suffix[m]: the remaining coordinates at their lower endpoint
    let mut suffix = vec![ScaledSum::EMPTY; k + 1];
    for pos in (0..k).rev() {
        let j = order[pos];
        suffix[pos] = suffix[pos + 1].push(ell[j], c[j]);
    }

    let mut best_m = 0;
    let mut best = f64::INFINITY;
    for m in 0..=k {
        let tau = prefix[m].ratio(suffix[m]);
        if tau < best {
            best = tau;
            best_m = m;
        }
    }

    let mut vertex = ell.to_vec();
    for &j in &order[..best_m] {
        vertex[j] = u[j];
    }
    let value = objective_unchecked(c, &vertex);
    ThresholdResult {
        value,
        m: best_m,
        vertex,
        sense: Sense::Min,
    }
}

/// Minimum over every vertex of the box. Degenerate coordinates contribute a single
/// choice. Ties keep the lexicographically smallest lower/upper pattern, with
/// coordinate 0 most significant and "lower" before "upper".
pub fn exhaustive_vertex_min(c: &[f64], bx: &ScoreBox) -> Result<ThresholdResult> {
    let k = bx.len();
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooLarge {
            k,
            max: MAX_EXHAUSTIVE_K,
        });
    }
    validate_direction(c, k)?;

    let a = stability_shift(&bx.u);
    let lo_w: Vec<f64> = bx.ell.iter().map(|l| (l - a).exp()).collect();
    let hi_w: Vec<f64> = bx.u.iter().map(|u| (u - a).exp()).collect();
    // free coordinates in significance order: coordinate 0 maps to the top bit
    let free: Vec<usize> = (0..k).filter(|&j| bx.ell[j] < bx.u[j]).collect();
    let n = free.len();

    let mut best = f64::INFINITY;
    let mut best_mask = 0u32;
    let mut upper = vec![false; k];
    for mask in 0u32..(1u32 << n) {
        for (bit, &j) in free.iter().enumerate() {
            upper[j] = mask >> (n - 1 - bit) & 1 == 1;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..k {
            let w = if upper[j] { hi_w[j] } else { lo_w[j] };
            num += c[j] * w;
            den += w;
        }
        let v = if den > f64::MIN_POSITIVE {
            num / den
        } else {
            let s: Vec<f64> = (0..k)
                .map(|j| if upper[j] { bx.u[j] } else { bx.ell[j] })
                .collect();
            objective_unchecked(c, &s)
        };
        if v < best {
            best = v;
            best_mask = mask;
        }
    }

    let mut vertex = bx.ell.clone();
    for (bit, &j) in free.iter().enumerate() {
        if best_mask >> (n - 1 - bit) & 1 == 1 {
            vertex[j] = bx.u[j];
        }
    }
    let value = objective_unchecked(c, &vertex);
    let m = vertex
        .iter()
        .zip(&bx.ell)
        .filter(|(v, l)| v != l)
        .count();
    Ok(ThresholdResult {
        value,
        m,
        vertex,
        sense: Sense::Min,
    })
}
