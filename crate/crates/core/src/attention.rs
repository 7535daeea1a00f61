//! Vertex-CROWN composition for one attention block.
//!
//! The margin `m_t(x)` is lower-bounded in three steps:
//!
//! 1. the suffix supplies `m_t >= beta_t + sum_i gamma_ti^T H+_i` ([`crate::suffix`]);
//! 2. each head's contribution `sum_j a_ij eta_tih^T V_j` is bounded below by
//!    `sum_j a_ij c_tihj` where `c_tihj` lower-bounds `eta_tih^T V_j` over the input box;
//! 3. every attention row is then a directional softmax problem over its score box.
//!
//! Step 3 is solved exactly by the threshold sweep (vertex arm) and, for comparison,
//! by the interval-softmax relaxation (baseline arm). The per-target hybrid takes
//! the larger of the two.

use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_directional_min, certified_baseline_directional_min};
use crate::certified::certified_directional_min;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::interval::Interval;
use crate::linalg::{dot, sum_rounding_bound, Affine, Mat};
use crate::model::{AttentionModelSpec, InputBox};
use crate::solver::{self, ScoreBox};
use crate::suffix::{suffix_bounds, SuffixAffineBound};

/// Arithmetic used by the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    /// Plain floating point.
    #[default]
    Fast,
    /// Outward-rounded softmax rows and score intervals; affine sums widened by a
    /// rounding-error bound. Fails with [`Error::Saturated`] on overflow.
    Certified,
}

/// Pre-softmax score intervals, indexed `[head][query row][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBoxTensor {
    pub ell: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
}

impl ScoreBoxTensor {
    pub fn heads(&self) -> usize {
        self.ell.len()
    }

    pub fn rows(&self) -> usize {
        self.ell.first().map_or(0, Vec::len)
    }

    pub fn row_box(&self, h: usize, i: usize) -> Result<ScoreBox> {
        ScoreBox::new(self.ell[h][i].clone(), self.u[h][i].clone())
    }

    /// True when every score of `scores` (same indexing) lies in its interval.
    pub fn contains(&self, scores: &[Vec<Vec<f64>>]) -> bool {
        scores.len() == self.heads()
            && scores.iter().enumerate().all(|(h, sh)| {
                sh.iter().enumerate().all(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .all(|(j, &s)| self.ell[h][i][j] <= s && s <= self.u[h][i][j])
                })
            })
    }
}

/// Per-scalar bounds indexed `[token][coordinate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarBounds {
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
}

impl ScalarBounds {
    fn with_shape(rows: usize, cols: usize) -> Self {
        Self {
            lo: vec![vec![0.0; cols]; rows],
            hi: vec![vec![0.0; cols]; rows],
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.lo.len(), self.lo.first().map_or(0, Vec::len))
    }
}

/// Query, key and value bounds of one head over the input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBounds {
    pub q: ScalarBounds,
    pub k: ScalarBounds,
    pub v: ScalarBounds,
}

/// Lower-bound coefficients of the value path, per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCoeffs {
    pub targets: Vec<usize>,
    /// `[target][head][row][key]`.
    pub c: Vec<Vec<Vec<Vec<f64>>>>,
    pub b_prime: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginBound {
    pub target: usize,
    pub l_vertex: f64,
    pub l_baseline: f64,
    pub l_hybrid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub true_class: usize,
    pub mode: BoundMode,
    pub bounds: Vec<MarginBound>,
    pub min_hybrid: f64,
    pub certified: bool,
}

/// Exact minimum of `w^T x + b` over `x_lo <= x <= x_hi`.
pub fn affine_lower_over_box(w: &[f64], b: f64, x_lo: &[f64], x_hi: &[f64]) -> Result<f64> {
    check_affine(w, x_lo, x_hi)?;
    Ok(affine_lower_unchecked(w, b, x_lo, x_hi))
}

/// Exact maximum of `w^T x + b` over `x_lo <= x <= x_hi`.
pub fn affine_upper_over_box(w: &[f64], b: f64, x_lo: &[f64], x_hi: &[f64]) -> Result<f64> {
    check_affine(w, x_lo, x_hi)?;
    Ok(affine_upper_unchecked(w, b, x_lo, x_hi))
}

fn check_affine(w: &[f64], x_lo: &[f64], x_hi: &[f64]) -> Result<()> {
    for (what, v) in [("box lower corner", x_lo), ("box upper corner", x_hi)] {
        if v.len() != w.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: w.len(),
                found: v.len(),
            });
        }
    }
    Ok(())
}

fn affine_lower_unchecked(w: &[f64], b: f64, x_lo: &[f64], x_hi: &[f64]) -> f64 {
    w.iter()
        .zip(x_lo.iter().zip(x_hi))
        .map(|(&wi, (&l, &h))| if wi >= 0.0 { wi * l } else { wi * h })
        .sum::<f64>()
        + b
}

fn affine_upper_unchecked(w: &[f64], b: f64, x_lo: &[f64], x_hi: &[f64]) -> f64 {
    w.iter()
        .zip(x_lo.iter().zip(x_hi))
        .map(|(&wi, (&l, &h))| if wi >= 0.0 { wi * h } else { wi * l })
        .sum::<f64>()
        + b
}

// Rounding allowance for evaluating `w^T x + b` anywhere in the box.
fn affine_slack(w: &[f64], b: f64, x_lo: &[f64], x_hi: &[f64]) -> f64 {
    let mag: f64 = w
        .iter()
        .zip(x_lo.iter().zip(x_hi))
        .map(|(&wi, (&l, &h))| wi.abs() * l.abs().max(h.abs()))
        .sum::<f64>()
        + b.abs();
    sum_rounding_bound(w.len() + 1, mag)
}

pub(crate) fn affine_bounds(w: &[f64], b: f64, ib: &InputBox, mode: BoundMode) -> (f64, f64) {
    let lo = affine_lower_unchecked(w, b, &ib.lo, &ib.hi);
    let hi = affine_upper_unchecked(w, b, &ib.lo, &ib.hi);
    match mode {
        BoundMode::Fast => (lo, hi),
        BoundMode::Certified => {
            let pad = affine_slack(w, b, &ib.lo, &ib.hi);
            ((lo - pad).next_down(), (hi + pad).next_up())
        }
    }
}

fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).abs()).sum()
}

fn corner_product(alo: f64, ahi: f64, blo: f64, bhi: f64) -> (f64, f64) {
    let p = [alo * blo, alo * bhi, ahi * blo, ahi * bhi];
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn check_score_inputs(q: &[ScalarBounds], k: &[ScalarBounds], masks: &[Mat]) -> Result<(usize, usize)> {
    if k.len() != q.len() || masks.len() != q.len() {
        return Err(Error::shape(
            "heads",
            format!("{} query heads, {} key heads, {} masks", q.len(), k.len(), masks.len()),
        ));
    }
    let Some(first) = q.first() else {
        return Err(Error::Empty("score heads"));
    };
    let (r, dh) = first.shape();
    for (h, (qh, kh)) in q.iter().zip(k).enumerate() {
        if qh.shape() != (r, dh) || kh.shape() != (r, dh) {
            return Err(Error::shape(format!("q/k bounds[{h}]"), "inconsistent shapes"));
        }
        if masks[h].rows != r || masks[h].cols != r {
            return Err(Error::shape(format!("mask[{h}]"), format!("expected [{r}, {r}]")));
        }
    }
    Ok((r, dh))
}

/// Score intervals from four-corner products of the query and key scalar bounds:
/// `[scale * sum_r min corner + mu, scale * sum_r max corner + mu]`.
pub fn score_boxes_interval_product(
    q: &[ScalarBounds],
    k: &[ScalarBounds],
    scale: f64,
    masks: &[Mat],
) -> Result<ScoreBoxTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("score scale must be positive, got {scale}")));
    }
    let (r, dh) = check_score_inputs(q, k, masks)?;
    let mut ell = Vec::with_capacity(q.len());
    let mut u = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let mut lh = vec![vec![0.0; r]; r];
        let mut uh = vec![vec![0.0; r]; r];
        for i in 0..r {
            for j in 0..r {
                let (mut plo, mut phi) = (0.0, 0.0);
                for c in 0..dh {
                    let (lo, hi) = corner_product(q[h].lo[i][c], q[h].hi[i][c], k[h].lo[j][c], k[h].hi[j][c]);
                    plo += lo;
                    phi += hi;
                }
                let mu = masks[h].get(i, j);
                lh[i][j] = scale * plo + mu;
                uh[i][j] = scale * phi + mu;
            }
        }
        ell.push(lh);
        u.push(uh);
    }
    Ok(ScoreBoxTensor { ell, u })
}

/// Outward-rounded variant of [`score_boxes_interval_product`] for `scale = 1/sqrt(dh)`.
pub fn score_boxes_outward(q: &[ScalarBounds], k: &[ScalarBounds], masks: &[Mat]) -> Result<ScoreBoxTensor> {
    let (r, dh) = check_score_inputs(q, k, masks)?;
    let scale = Interval::point(1.0).checked_div(Interval::around((dh as f64).sqrt()))?;
    let mut ell = Vec::with_capacity(q.len());
    let mut u = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let mut lh = vec![vec![0.0; r]; r];
        let mut uh = vec![vec![0.0; r]; r];
        for i in 0..r {
            for j in 0..r {
                let mut acc = Interval::point(0.0);
                for c in 0..dh {
                    let qi = Interval::new(q[h].lo[i][c], q[h].hi[i][c])?;
                    let kj = Interval::new(k[h].lo[j][c], k[h].hi[j][c])?;
                    acc = acc + qi * kj;
                }
                let s = acc * scale + Interval::point(masks[h].get(i, j));
                if s.is_saturated() {
                    return Err(Error::Saturated);
                }
                lh[i][j] = s.lo();
                uh[i][j] = s.hi();
            }
        }
        ell.push(lh);
        u.push(uh);
    }
    Ok(ScoreBoxTensor { ell, u })
}

fn check_box(model: &AttentionModelSpec, ib: &InputBox) -> Result<()> {
    if ib.len() != model.input_dim() {
        return Err(Error::LengthMismatch {
            what: "input box",
            expected: model.input_dim(),
            found: ib.len(),
        });
    }
    Ok(())
}

/// Per-token affine maps over the token's own patch, with the matching sub-box.
/// Patches are disjoint, so a sum over tokens of per-patch bounds is exact.
pub(crate) struct LocalTokens {
    pub maps: Vec<Affine>,
    pub boxes: Vec<InputBox>,
}

impl LocalTokens {
    pub fn new(model: &AttentionModelSpec, ib: &InputBox) -> Self {
        let r = model.tokens();
        Self {
            maps: (0..r).map(|i| model.token_local_affine(i)).collect(),
            boxes: (0..r).map(|i| ib.gather(&model.patch_pixels(i))).collect(),
        }
    }

    /// Lower and upper bounds of `sum_i g_i^T H_i(x) + b` over the box.
    pub fn contracted_bounds(&self, g: &[&[f64]], b: f64, mode: BoundMode) -> (f64, f64) {
        let mut lo = b;
        let mut hi = b;
        let mut mag = b.abs();
        for (i, gi) in g.iter().enumerate() {
            let (w, bi) = self.maps[i].contract(gi);
            let (l, h) = affine_bounds(&w, bi, &self.boxes[i], mode);
            lo += l;
            hi += h;
            mag += l.abs().max(h.abs());
        }
        match mode {
            BoundMode::Fast => (lo, hi),
            BoundMode::Certified => {
                let pad = sum_rounding_bound(g.len() + 1, mag);
                ((lo - pad).next_down(), (hi + pad).next_up())
            }
        }
    }
}

/// Query, key and value scalar bounds per head, from exact affine bounds over the box.
pub fn projection_bounds(model: &AttentionModelSpec, ib: &InputBox, mode: BoundMode) -> Result<Vec<HeadBounds>> {
    projection_bounds_with(model, ib, mode, Exec::Sequential)
}

pub fn projection_bounds_with(
    model: &AttentionModelSpec,
    ib: &InputBox,
    mode: BoundMode,
    exec: Exec,
) -> Result<Vec<HeadBounds>> {
    check_box(model, ib)?;
    let local = LocalTokens::new(model, ib);
    let r = local.maps.len();
    let dh = model.head_dim();
    let bound = |m: &Mat, b: &[f64]| -> ScalarBounds {
        let mut out = ScalarBounds::with_shape(r, dh);
        for (i, tok) in local.maps.iter().enumerate() {
            let a = tok.then(m, b);
            for c in 0..dh {
                let (lo, hi) = affine_bounds(a.w.row(c), a.b[c], &local.boxes[i], mode);
                out.lo[i][c] = lo;
                out.hi[i][c] = hi;
            }
        }
        out
    };
    Ok(exec.map(&model.heads, |hw| HeadBounds {
        q: bound(&hw.wq, &hw.bq),
        k: bound(&hw.wk, &hw.bk),
        v: bound(&hw.wv, &hw.bv),
    }))
}

/// Projection bounds and score boxes for one model and input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBounds {
    pub heads: Vec<HeadBounds>,
    pub scores: ScoreBoxTensor,
}

impl AttentionBounds {
    pub fn compute(model: &AttentionModelSpec, ib: &InputBox, mode: BoundMode) -> Result<Self> {
        Self::compute_with(model, ib, mode, Exec::Sequential)
    }

    pub fn compute_with(model: &AttentionModelSpec, ib: &InputBox, mode: BoundMode, exec: Exec) -> Result<Self> {
        let heads = projection_bounds_with(model, ib, mode, exec)?;
        let q: Vec<ScalarBounds> = heads.iter().map(|h| h.q.clone()).collect();
        let k: Vec<ScalarBounds> = heads.iter().map(|h| h.k.clone()).collect();
        let masks: Vec<Mat> = model.heads.iter().map(|h| h.mask.clone()).collect();
        let scores = match mode {
            BoundMode::Fast => {
                score_boxes_interval_product(&q, &k, 1.0 / (model.head_dim() as f64).sqrt(), &masks)?
            }
            BoundMode::Certified => score_boxes_outward(&q, &k, &masks)?,
        };
        Ok(Self { heads, scores })
    }

    /// Bounds on each head's attention output `O_i = sum_j a_ij V_j`, per coordinate:
    /// the lower end is the exact directional minimum with the value lower bounds as
    /// direction, the upper end the directional maximum with the value upper bounds.
    pub fn output_bounds(&self, mode: BoundMode, exec: Exec) -> Result<Vec<ScalarBounds>> {
        let nh = self.heads.len();
        let r = self.scores.rows();
        let dh = self.heads.first().map_or(0, |h| h.v.shape().1);
        let cells = exec.map_range(nh * r, |cell| -> Result<(Vec<f64>, Vec<f64>)> {
            let (h, i) = (cell / r, cell % r);
            let bx = self.scores.row_box(h, i)?;
            let v = &self.heads[h].v;
            let mut lo = vec![0.0; dh];
            let mut hi = vec![0.0; dh];
            for c in 0..dh {
                let dlo: Vec<f64> = (0..r).map(|j| v.lo[j][c]).collect();
                let dhi: Vec<f64> = (0..r).map(|j| v.hi[j][c]).collect();
                match mode {
                    BoundMode::Fast => {
                        lo[c] = solver::directional_min(&dlo, &bx)?.value;
                        hi[c] = solver::directional_max(&dhi, &bx)?.value;
                    }
                    BoundMode::Certified => {
                        lo[c] = certified_directional_min(&dlo, &bx)?.certificate()?;
                        let neg: Vec<f64> = dhi.iter().map(|x| -x).collect();
                        hi[c] = -certified_directional_min(&neg, &bx)?.certificate()?;
                    }
                }
            }
            Ok((lo, hi))
        });
        let mut out: Vec<ScalarBounds> = (0..nh).map(|_| ScalarBounds::with_shape(r, dh)).collect();
        for (cell, res) in cells.into_iter().enumerate() {
            let (lo, hi) = res?;
            out[cell / r].lo[cell % r] = lo;
            out[cell / r].hi[cell % r] = hi;
        }
        Ok(out)
    }
}

/// Lower-bound coefficients `c_tihj <= eta_tih^T V_j^h(x)` with
/// `eta_tih = (W_O^h)^T gamma_ti`, and the constant part `b'_t` collecting the
/// suffix offset, the residual path and the output bias.
pub fn value_coefficients(
    gamma: &[SuffixAffineBound],
    model: &AttentionModelSpec,
    ib: &InputBox,
    mode: BoundMode,
) -> Result<ValueCoeffs> {
    value_coefficients_with(gamma, model, ib, mode, Exec::Sequential)
}

/// [`value_coefficients`] with targets processed under `exec`.
pub fn value_coefficients_with(
    gamma: &[SuffixAffineBound],
    model: &AttentionModelSpec,
    ib: &InputBox,
    mode: BoundMode,
    exec: Exec,
) -> Result<ValueCoeffs> {
    check_box(model, ib)?;
    let r = model.tokens();
    let d = model.model_dim;
    for g in gamma {
        if g.gamma.len() != r || g.gamma.iter().any(|row| row.len() != d) {
            return Err(Error::shape("suffix gamma", format!("expected [{r}, {d}]")));
        }
    }
    let local = LocalTokens::new(model, ib);
    let values: Vec<Vec<Affine>> = model
        .heads
        .iter()
        .map(|hw| local.maps.iter().map(|t| t.then(&hw.wv, &hw.bv)).collect())
        .collect();

    let per_target = exec.map(gamma, |g| {
        let c: Vec<Vec<Vec<f64>>> = model
            .heads
            .iter()
            .zip(&values)
            .map(|(hw, vh)| {
                (0..r)
                    .map(|i| {
                        let eta = hw.wo.tmatvec(&g.gamma[i]);
                        vh.iter()
                            .enumerate()
                            .map(|(j, vj)| {
                                let (w, b) = vj.contract(&eta);
                                affine_bounds(&w, b, &local.boxes[j], mode).0
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut b = g.beta;
        // sum of |terms| entering `b`, for the certified rounding allowance
        let mut mag = g.beta.abs();
        for gi in &g.gamma {
            b += dot(gi, &model.out_b);
            mag += abs_dot(gi, &model.out_b);
        }
        let mut lo = if model.residual {
            let rows: Vec<&[f64]> = g.gamma.iter().map(Vec::as_slice).collect();
            local.contracted_bounds(&rows, b, mode).0
        } else {
            b
        };
        if mode == BoundMode::Certified {
            lo = (lo - sum_rounding_bound(r * d + 1, mag)).next_down();
        }
        (c, lo)
    });
    let (c, b_prime) = per_target.into_iter().unzip();
    Ok(ValueCoeffs {
        targets: gamma.iter().map(|g| g.target).collect(),
        c,
        b_prime,
    })
}

/// How each attention row's directional minimum is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowMethod {
    /// Exact threshold sweep.
    Vertex,
    /// Interval-softmax relaxation.
    Baseline,
}

/// `b'_t + sum_{h,i}` of the per-row bound, for target index `t` of `coeffs`.
pub fn layer_bound(
    coeffs: &ValueCoeffs,
    scores: &ScoreBoxTensor,
    t: usize,
    method: RowMethod,
    mode: BoundMode,
    exec: Exec,
) -> Result<f64> {
    let ct = coeffs
        .c
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("target index {t} out of range")))?;
    if ct.len() != scores.heads() || ct.iter().any(|h| h.len() != scores.rows()) {
        return Err(Error::shape(
            "value coefficients",
            "heads/rows do not match the score boxes",
        ));
    }
    let r = scores.rows();
    let rows = exec.map_range(ct.len() * r, |cell| -> Result<f64> {
        let (h, i) = (cell / r, cell % r);
        let bx = scores.row_box(h, i)?;
        let c = &ct[h][i];
        match (method, mode) {
            (RowMethod::Vertex, BoundMode::Fast) => Ok(solver::directional_min(c, &bx)?.value),
            (RowMethod::Baseline, BoundMode::Fast) => baseline_directional_min(c, &bx),
            (RowMethod::Vertex, BoundMode::Certified) => certified_directional_min(c, &bx)?.certificate(),
            (RowMethod::Baseline, BoundMode::Certified) => {
                certified_baseline_directional_min(c, &bx)?.certificate()
            }
        }
    });
    match mode {
        BoundMode::Fast => {
            let mut total = coeffs.b_prime[t];
            for v in rows {
                total += v?;
            }
            Ok(total)
        }
        BoundMode::Certified => {
            let mut total = Interval::point(coeffs.b_prime[t]);
            for v in rows {
                total = total + Interval::point(v?);
            }
            if total.is_saturated() {
                return Err(Error::Saturated);
            }
            Ok(total.lo())
        }
    }
}

/// Vertex-CROWN margin bound `L_VC,t = b'_t + sum_{h,i} L_box(c_tih, row box)`.
pub fn vertex_crown_bound(coeffs: &ValueCoeffs, scores: &ScoreBoxTensor, t: usize) -> Result<f64> {
    layer_bound(coeffs, scores, t, RowMethod::Vertex, BoundMode::Fast, Exec::Sequential)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CertifyOptions {
    pub mode: BoundMode,
    pub exec: Exec,
}

/// Bound every margin `m_t = logit_y - logit_t`, `t != y`, over the input box and
/// certify when all hybrid bounds are positive.
pub fn target_hybrid_certify(
    model: &AttentionModelSpec,
    ib: &InputBox,
    y: usize,
    opts: CertifyOptions,
) -> Result<CertificationReport> {
    check_box(model, ib)?;
    if y >= model.classes {
        return Err(Error::InvalidArgument(format!(
            "class {y} out of range for {} classes",
            model.classes
        )));
    }
    let targets: Vec<usize> = (0..model.classes).filter(|&t| t != y).collect();
    let att = AttentionBounds::compute_with(model, ib, opts.mode, opts.exec)?;
    let sfx = suffix_bounds(model, ib, &att, y, &targets, opts.mode, opts.exec)?;
    let coeffs = value_coefficients_with(&sfx, model, ib, opts.mode, opts.exec)?;

    let bounds = opts.exec.map_range(targets.len(), |ti| -> Result<MarginBound> {
        let seq = Exec::Sequential;
        let l_vertex = layer_bound(&coeffs, &att.scores, ti, RowMethod::Vertex, opts.mode, seq)?;
        let l_baseline = layer_bound(&coeffs, &att.scores, ti, RowMethod::Baseline, opts.mode, seq)?;
        Ok(MarginBound {
            target: targets[ti],
            l_vertex,
            l_baseline,
            l_hybrid: l_vertex.max(l_baseline),
        })
    });
    let bounds = bounds.into_iter().collect::<Result<Vec<_>>>()?;
    let min_hybrid = bounds.iter().map(|b| b.l_hybrid).fold(f64::INFINITY, f64::min);
    Ok(CertificationReport {
        true_class: y,
        mode: opts.mode,
        certified: min_hybrid > 0.0,
        min_hybrid,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_image, RandomModelConfig, SuffixKind};

    fn sb(lo: &[&[f64]], hi: &[&[f64]]) -> ScalarBounds {
        ScalarBounds {
            lo: lo.iter().map(|r| r.to_vec()).collect(),
            hi: hi.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn interval_product_examples() {
        let cases = [
            ((1.0, 2.0), (3.0, 4.0), 0.0, (3.0, 8.0)),
            ((1.0, 2.0), (-1.0, 1.0), 0.0, (-2.0, 2.0)),
            ((0.0, 0.0), (5.0, 5.0), 1.0, (1.0, 1.0)),
        ];
        for (q, k, mu, want) in cases {
            let qb = sb(&[&[q.0]], &[&[q.1]]);
            let kb = sb(&[&[k.0]], &[&[k.1]]);
            let mask = Mat::from_rows(&[vec![mu]]);
            let s = score_boxes_interval_product(std::slice::from_ref(&qb), std::slice::from_ref(&kb), 1.0, std::slice::from_ref(&mask)).unwrap();
            assert_eq!((s.ell[0][0][0], s.u[0][0][0]), want);
            let o = score_boxes_outward(&[qb], &[kb], &[mask]).unwrap();
            assert!(o.ell[0][0][0] <= want.0 && o.u[0][0][0] >= want.1);
        }
    }

    #[test]
    fn interval_product_rejects_mismatch() {
        let qb = sb(&[&[1.0]], &[&[2.0]]);
        let kb = sb(&[&[1.0, 2.0]], &[&[2.0, 3.0]]);
        assert!(score_boxes_interval_product(&[qb], &[kb], 1.0, &[Mat::zeros(1, 1)]).is_err());
    }

    #[test]
    fn affine_over_box_examples() {
        assert_eq!(affine_lower_over_box(&[1.0, -2.0], 0.0, &[0.0; 2], &[1.0; 2]).unwrap(), -2.0);
        assert_eq!(affine_lower_over_box(&[0.0, 0.0], 5.0, &[0.0; 2], &[1.0; 2]).unwrap(), 5.0);
        assert_eq!(affine_lower_over_box(&[1.0, 1.0], 0.0, &[-1.0; 2], &[1.0; 2]).unwrap(), -2.0);
        assert_eq!(affine_upper_over_box(&[1.0, -2.0], 0.5, &[0.0; 2], &[1.0; 2]).unwrap(), 1.5);
        assert!(affine_lower_over_box(&[1.0], 0.0, &[0.0; 2], &[1.0; 2]).is_err());
    }

    fn single_row(c: Vec<f64>, ell: Vec<f64>, u: Vec<f64>, rows: usize, b: f64) -> (ValueCoeffs, ScoreBoxTensor) {
        let coeffs = ValueCoeffs {
            targets: vec![1],
            c: vec![vec![vec![c; rows]]],
            b_prime: vec![b],
        };
        let scores = ScoreBoxTensor {
            ell: vec![vec![ell; rows]],
            u: vec![vec![u; rows]],
        };
        (coeffs, scores)
    }

    #[test]
    fn vertex_crown_examples() {
        let (c, s) = single_row(vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2], 1, 0.0);
        assert_eq!(vertex_crown_bound(&c, &s, 0).unwrap(), 0.5);

        let (c, s) = single_row(vec![0.0, 1.0], vec![-1.0; 2], vec![1.0; 2], 1, 0.0);
        let v = vertex_crown_bound(&c, &s, 0).unwrap();
        assert!((v - 0.119_202_922_022_117_6).abs() < 1e-15);

        let (c, s) = single_row(vec![0.0, 1.0], vec![-1.0; 2], vec![1.0; 2], 2, 1.0);
        let v2 = vertex_crown_bound(&c, &s, 0).unwrap();
        assert!((v2 - (1.0 + 2.0 * v)).abs() < 1e-15);

        assert!(vertex_crown_bound(&c, &s, 3).is_err());
    }

    #[test]
    fn certified_layer_bound_is_below_fast() {
        let (c, s) = single_row(vec![-1.0, 0.0, 1.0], vec![-1.0; 3], vec![1.0; 3], 2, 0.25);
        for m in [RowMethod::Vertex, RowMethod::Baseline] {
            let fast = layer_bound(&c, &s, 0, m, BoundMode::Fast, Exec::Sequential).unwrap();
            let cert = layer_bound(&c, &s, 0, m, BoundMode::Certified, Exec::Sequential).unwrap();
            assert!(cert <= fast && fast - cert < 1e-12);
        }
    }

    fn model(kind: SuffixKind, seed: u64) -> AttentionModelSpec {
        let cfg = RandomModelConfig {
            suffix: kind,
            heads: 2,
            ..Default::default()
        };
        AttentionModelSpec::random(&cfg, seed).unwrap()
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let m = model(SuffixKind::Linear, 1);
        let ib = InputBox::linf_clipped(&random_image(16, 1), 0.1).unwrap();
        let g = SuffixAffineBound {
            target: 1,
            beta: 0.75,
            gamma: vec![vec![0.0; 4]; 4],
        };
        let vc = value_coefficients(&[g], &m, &ib, BoundMode::Fast).unwrap();
        assert_eq!(vc.b_prime, vec![0.75]);
        assert!(vc.c[0].iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn point_box_coefficients_are_exact() {
        let m = model(SuffixKind::Linear, 2);
        let x = random_image(16, 2);
        let ib = InputBox::point(&x);
        let g = SuffixAffineBound {
            target: 1,
            beta: 0.0,
            gamma: (0..4).map(|i| vec![0.5 - i as f64, 1.0, -0.25, 2.0]).collect(),
        };
        let vc = value_coefficients(std::slice::from_ref(&g), &m, &ib, BoundMode::Fast).unwrap();
        let tr = m.forward_trace(&x).unwrap();
        for (h, hw) in m.heads.iter().enumerate() {
            for i in 0..4 {
                let eta = hw.wo.tmatvec(&g.gamma[i]);
                for j in 0..4 {
                    let exact = dot(&eta, &tr.values[h][j]);
                    assert!((vc.c[0][h][i][j] - exact).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn point_box_bounds_match_clean_margin() {
        for kind in [SuffixKind::Linear, SuffixKind::Mlp1] {
            let m = model(kind, 3);
            let x = random_image(16, 3);
            let logits = m.forward(&x).unwrap();
            let y = crate::model::argmax(&logits);
            let rep = target_hybrid_certify(&m, &InputBox::point(&x), y, CertifyOptions::default()).unwrap();
            for b in &rep.bounds {
                let margin = logits[y] - logits[b.target];
                assert!((b.l_vertex - margin).abs() < 1e-9, "{kind:?} {b:?} {margin}");
                assert!((b.l_hybrid - margin).abs() < 1e-9);
            }
            assert!(rep.certified);
        }
    }

    #[test]
    fn hybrid_is_max_and_vertex_dominates() {
        let m = model(SuffixKind::Mlp1, 4);
        let ib = InputBox::linf_clipped(&random_image(16, 4), 0.05).unwrap();
        let rep = target_hybrid_certify(&m, &ib, 0, CertifyOptions::default()).unwrap();
        for b in &rep.bounds {
            assert_eq!(b.l_hybrid, b.l_vertex.max(b.l_baseline));
            assert!(b.l_vertex >= b.l_baseline - 1e-12);
        }
    }

    #[test]
    fn certified_mode_is_conservative() {
        let m = model(SuffixKind::Linear, 5);
        let ib = InputBox::linf_clipped(&random_image(16, 5), 0.02).unwrap();
        let fast = target_hybrid_certify(&m, &ib, 1, CertifyOptions::default()).unwrap();
        let cert = target_hybrid_certify(
            &m,
            &ib,
            1,
            CertifyOptions {
                mode: BoundMode::Certified,
                exec: Exec::Sequential,
            },
        )
        .unwrap();
        for (f, c) in fast.bounds.iter().zip(&cert.bounds) {
            assert!(c.l_vertex <= f.l_vertex);
            assert!(f.l_vertex - c.l_vertex < 1e-9);
        }
    }

    #[test]
    fn parallel_and_sequential_reports_match() {
        let m = model(SuffixKind::Mlp1, 6);
        let ib = InputBox::linf_clipped(&random_image(16, 6), 0.03).unwrap();
        let run = |exec| {
            target_hybrid_certify(&m, &ib, 2, CertifyOptions { mode: BoundMode::Fast, exec }).unwrap()
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn rejects_bad_class_and_box() {
        let m = model(SuffixKind::Linear, 7);
        let ib = InputBox::point(&random_image(16, 7));
        assert!(target_hybrid_certify(&m, &ib, 9, CertifyOptions::default()).is_err());
        let short = InputBox::point(&[0.5; 3]);
        assert!(target_hybrid_certify(&m, &short, 0, CertifyOptions::default()).is_err());
    }
}
