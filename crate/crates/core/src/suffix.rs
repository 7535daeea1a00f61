//! Affine lower bounds of a margin in terms of the post-attention state:
//! `logit_y - logit_t >= beta_t + sum_i gamma_ti^T H+_i`.
//!
//! A linear suffix gives this with equality. For a one-hidden-layer ReLU suffix
//! each hidden unit is replaced by a linear lower or upper line, chosen by the sign
//! of its outgoing margin weight, using pre-activation bounds from
//! [`interval_forward`].

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBounds, BoundMode, LocalTokens};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::interval::Interval;
use crate::linalg::{dot, Mat};
use crate::model::{AttentionModelSpec, InputBox, Suffix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixAffineBound {
    pub target: usize,
    pub beta: f64,
    /// `[row][model dim]`.
    pub gamma: Vec<Vec<f64>>,
}

impl SuffixAffineBound {
    /// `beta + sum_i gamma_i^T hplus_i`.
    pub fn eval(&self, hplus: &[Vec<f64>]) -> f64 {
        self.beta
            + self
                .gamma
                .iter()
                .zip(hplus)
                .map(|(g, h)| dot(g, h))
                .sum::<f64>()
    }
}

/// Bounds on the first suffix layer's outputs: hidden pre-activations for an
/// MLP suffix, logits for a linear one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreActBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PreActBox {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.len()
            && z.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| l <= v && v <= h)
    }
}

fn check_classes(classes: usize, y: usize, t: usize) -> Result<()> {
    if y >= classes || t >= classes {
        return Err(Error::InvalidArgument(format!(
            "classes ({y}, {t}) out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn split_rows(flat: Vec<f64>, tokens: usize) -> Result<Vec<Vec<f64>>> {
    if tokens == 0 || flat.len() % tokens != 0 {
        return Err(Error::shape(
            "suffix input",
            format!("{} features do not split into {tokens} rows", flat.len()),
        ));
    }
    let d = flat.len() / tokens;
    Ok(flat.chunks(d).map(<[f64]>::to_vec).collect())
}

/// Exact margin form of a linear suffix: `gamma = W_y - W_t`, `beta = b_y - b_t`.
pub fn linear_suffix_bound(suffix: &Suffix, tokens: usize, y: usize, t: usize) -> Result<SuffixAffineBound> {
    let Suffix::Linear { w, b } = suffix else {
        return Err(Error::InvalidArgument("linear_suffix_bound needs a linear suffix".into()));
    };
    check_classes(w.rows, y, t)?;
    let diff: Vec<f64> = w.row(y).iter().zip(w.row(t)).map(|(a, c)| a - c).collect();
    Ok(SuffixAffineBound {
        target: t,
        beta: b[y] - b[t],
        gamma: split_rows(diff, tokens)?,
    })
}

/// Slope and intercept of the linear function replacing `relu(z)` on `[l, u]`.
/// `lower` selects a line below the ReLU, otherwise above it.
fn relu_line(l: f64, u: f64, lower: bool) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if l >= 0.0 {
        (1.0, 0.0)
    } else if lower {
        // slope 1 or 0, whichever leaves the smaller area between line and ReLU
        (if u >= -l { 1.0 } else { 0.0 }, 0.0)
    } else {
        let s = u / (u - l);
        (s, -s * l)
    }
}

/// Backward linear relaxation of `logit_y - logit_t` through a one-hidden-layer
/// ReLU suffix, given bounds on its hidden pre-activations.
pub fn relu_suffix_bound(
    suffix: &Suffix,
    tokens: usize,
    preact: &PreActBox,
    y: usize,
    t: usize,
) -> Result<SuffixAffineBound> {
    let Suffix::Mlp1 { w1, b1, w2, b2 } = suffix else {
        return Err(Error::InvalidArgument("relu_suffix_bound needs an mlp1 suffix".into()));
    };
    check_classes(w2.rows, y, t)?;
    if preact.lo.len() != w1.rows || preact.hi.len() != w1.rows {
        return Err(Error::LengthMismatch {
            what: "pre-activation bounds",
            expected: w1.rows,
            found: preact.lo.len().min(preact.hi.len()),
        });
    }
    let mut beta = b2[y] - b2[t];
    let mut lambda = vec![0.0; w1.rows];
    for k in 0..w1.rows {
        let g = w2.get(y, k) - w2.get(t, k);
        if g == 0.0 {
            continue;
        }
        let (slope, icpt) = relu_line(preact.lo[k], preact.hi[k], g > 0.0);
        lambda[k] = g * slope;
        beta += g * icpt;
    }
    beta += dot(&lambda, b1);
    Ok(SuffixAffineBound {
        target: t,
        beta,
        gamma: split_rows(w1.tmatvec(&lambda), tokens)?,
    })
}

/// Enclosures of the first suffix layer's outputs over the input box.
pub fn interval_forward(model: &AttentionModelSpec, ib: &InputBox) -> Result<PreActBox> {
    let att = AttentionBounds::compute(model, ib, BoundMode::Fast)?;
    interval_forward_with(model, ib, &att, BoundMode::Fast, Exec::Sequential)
}

/// [`interval_forward`] reusing precomputed projection and score bounds.
///
/// Each first-layer output is `res part (affine in x) + constant +
/// sum_{i,h,r} coef * O^h_{i,r}`, where the attention outputs `O` are bounded per
/// coordinate; the affine part is bounded exactly over the box.
pub fn interval_forward_with(
    model: &AttentionModelSpec,
    ib: &InputBox,
    att: &AttentionBounds,
    mode: BoundMode,
    exec: Exec,
) -> Result<PreActBox> {
    let out = att.output_bounds(mode, exec)?;
    let (w1, b1) = model.suffix.first_layer();
    let r = model.tokens();
    let d = model.model_dim;
    let local = LocalTokens::new(model, ib);

    let neurons = exec.map_range(w1.rows, |k| -> Result<(f64, f64)> {
        let row = w1.row(k);
        let rows: Vec<&[f64]> = (0..r).map(|i| &row[i * d..(i + 1) * d]).collect();
        let mut b = b1[k];
        let mut rest_lo = Vec::new();
        let mut rest_hi = Vec::new();
        for (i, wi) in rows.iter().enumerate() {
            b += dot(wi, &model.out_b);
            for (h, hw) in model.heads.iter().enumerate() {
                let coef = hw.wo.tmatvec(wi);
                for (c, &a) in coef.iter().enumerate() {
                    let (olo, ohi) = (out[h].lo[i][c], out[h].hi[i][c]);
                    rest_lo.push(if a >= 0.0 { a * olo } else { a * ohi });
                    rest_hi.push(if a >= 0.0 { a * ohi } else { a * olo });
                }
            }
        }
        if mode == BoundMode::Certified {
            // `b` accumulates R + 1 rounded dot products
            let mag = b1[k].abs() + rows.iter().map(|wi| wi.iter().zip(&model.out_b).map(|(x, y)| (x * y).abs()).sum::<f64>()).sum::<f64>();
            let pad = crate::linalg::sum_rounding_bound(r * d + 1, mag);
            rest_lo.push(-pad);
            rest_hi.push(pad);
        }
        let (alo, ahi) = if model.residual {
            local.contracted_bounds(&rows, b, mode)
        } else {
            (b, b)
        };
        Ok(match mode {
            BoundMode::Fast => (alo + rest_lo.iter().sum::<f64>(), ahi + rest_hi.iter().sum::<f64>()),
            BoundMode::Certified => {
                let mut lo = Interval::point(alo);
                let mut hi = Interval::point(ahi);
                for (&l, &h) in rest_lo.iter().zip(&rest_hi) {
                    lo = lo + Interval::around(l);
                    hi = hi + Interval::around(h);
                }
                if lo.is_saturated() || hi.is_saturated() {
                    return Err(Error::Saturated);
                }
                (lo.lo(), hi.hi())
            }
        })
    });
    let mut lo = Vec::with_capacity(w1.rows);
    let mut hi = Vec::with_capacity(w1.rows);
    for n in neurons {
        let (l, h) = n?;
        lo.push(l.min(h));
        hi.push(l.max(h));
    }
    Ok(PreActBox { lo, hi })
}

/// Suffix bounds for every target, computing pre-activation bounds when needed.
pub fn suffix_bounds(
    model: &AttentionModelSpec,
    ib: &InputBox,
    att: &AttentionBounds,
    y: usize,
    targets: &[usize],
    mode: BoundMode,
    exec: Exec,
) -> Result<Vec<SuffixAffineBound>> {
    let r = model.tokens();
    match &model.suffix {
        Suffix::Linear { .. } => targets
            .iter()
            .map(|&t| linear_suffix_bound(&model.suffix, r, y, t))
            .collect(),
        Suffix::Mlp1 { .. } => {
            let pre = interval_forward_with(model, ib, att, mode, exec)?;
            targets
                .iter()
                .map(|&t| relu_suffix_bound(&model.suffix, r, &pre, y, t))
                .collect()
        }
    }
}

/// Exact composed margin of an MLP suffix whose hidden units all have a fixed
/// activation pattern (`active[k]`), as an affine form over flattened `H+`.
pub fn fixed_pattern_margin(w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64], active: &[bool], y: usize, t: usize) -> (Vec<f64>, f64) {
    let mut lambda = vec![0.0; w1.rows];
    for k in 0..w1.rows {
        if active[k] {
            lambda[k] = w2.get(y, k) - w2.get(t, k);
        }
    }
    (w1.tmatvec(&lambda), b2[y] - b2[t] + dot(&lambda, b1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_image, RandomModelConfig, SuffixKind};

    #[test]
    fn linear_margin_row() {
        let s = Suffix::Linear {
            w: Mat::identity(2),
            b: vec![0.5, -0.25],
        };
        let g = linear_suffix_bound(&s, 1, 0, 1).unwrap();
        assert_eq!(g.gamma, vec![vec![1.0, -1.0]]);
        assert_eq!(g.beta, 0.75);

        let s = Suffix::Linear {
            w: Mat::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]),
            b: vec![3.0, 1.0],
        };
        let g = linear_suffix_bound(&s, 1, 0, 1).unwrap();
        assert_eq!(g.gamma, vec![vec![0.0, 0.0]]);
        assert_eq!(g.beta, 2.0);
        assert!(linear_suffix_bound(&s, 1, 0, 5).is_err());
    }

    #[test]
    fn linear_bound_matches_forward() {
        let m = AttentionModelSpec::random(&RandomModelConfig::default(), 3).unwrap();
        for seed in 0..20 {
            let tr = m.forward_trace(&random_image(16, seed)).unwrap();
            let g = linear_suffix_bound(&m.suffix, 4, 0, 2).unwrap();
            let margin = tr.logits[0] - tr.logits[2];
            assert!((g.eval(&tr.hplus) - margin).abs() < 1e-12);
        }
    }

    fn mlp(w1: Vec<Vec<f64>>, b1: Vec<f64>) -> Suffix {
        let h = w1.len();
        Suffix::Mlp1 {
            w1: Mat::from_rows(&w1),
            b1,
            w2: Mat::from_rows(&[vec![1.0; h], (0..h).map(|k| if k % 2 == 0 { -1.0 } else { 2.0 }).collect()]),
            b2: vec![0.1, -0.2],
        }
    }

    #[test]
    fn stable_neurons_are_exact() {
        let s = mlp(vec![vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.3, 0.3]], vec![0.0, 1.0, -0.5]);
        let Suffix::Mlp1 { w1, b1, w2, b2 } = &s else { unreachable!() };
        let active_box = PreActBox {
            lo: vec![0.5, 0.1, 2.0],
            hi: vec![1.0, 3.0, 4.0],
        };
        let g = relu_suffix_bound(&s, 1, &active_box, 0, 1).unwrap();
        let (w, b) = fixed_pattern_margin(w1, b1, w2, b2, &[true; 3], 0, 1);
        assert!((g.beta - b).abs() < 1e-12);
        assert!(g.gamma[0].iter().zip(&w).all(|(a, c)| (a - c).abs() < 1e-12));

        let dead_box = PreActBox {
            lo: vec![-3.0; 3],
            hi: vec![-0.1; 3],
        };
        let g = relu_suffix_bound(&s, 1, &dead_box, 0, 1).unwrap();
        assert_eq!(g.gamma, vec![vec![0.0, 0.0]]);
        assert!((g.beta - 0.3).abs() < 1e-15);
    }

    #[test]
    fn relu_lines_bracket_relu() {
        for (l, u) in [(-1.0, 3.0), (-3.0, 1.0), (-2.0, 2.0), (-1e-3, 5.0)] {
            let (ls, li) = relu_line(l, u, true);
            let (us, ui) = relu_line(l, u, false);
            for k in 0..=100 {
                let z = l + (u - l) * k as f64 / 100.0;
                let r = z.max(0.0);
                assert!(ls * z + li <= r + 1e-12);
                assert!(us * z + ui >= r - 1e-12);
            }
        }
    }

    #[test]
    fn relu_rejects_linear_and_short_box() {
        let lin = Suffix::Linear {
            w: Mat::identity(2),
            b: vec![0.0; 2],
        };
        let pb = PreActBox { lo: vec![0.0], hi: vec![1.0] };
        assert!(relu_suffix_bound(&lin, 1, &pb, 0, 1).is_err());
        let s = mlp(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2]);
        assert!(relu_suffix_bound(&s, 1, &pb, 0, 1).is_err());
        assert!(linear_suffix_bound(&s, 1, 0, 1).is_err());
    }

    #[test]
    fn point_box_preacts_are_exact() {
        let cfg = RandomModelConfig {
            suffix: SuffixKind::Mlp1,
            ..Default::default()
        };
        let m = AttentionModelSpec::random(&cfg, 5).unwrap();
        let x = random_image(16, 5);
        let pre = interval_forward(&m, &InputBox::point(&x)).unwrap();
        let tr = m.forward_trace(&x).unwrap();
        for (k, z) in tr.preact.iter().enumerate() {
            assert!((pre.lo[k] - z).abs() < 1e-12 && (pre.hi[k] - z).abs() < 1e-12);
        }
    }

    #[test]
    fn wider_box_never_shrinks_preacts() {
        let cfg = RandomModelConfig {
            suffix: SuffixKind::Mlp1,
            heads: 2,
            ..Default::default()
        };
        let m = AttentionModelSpec::random(&cfg, 6).unwrap();
        let x = random_image(16, 6);
        let mut prev = interval_forward(&m, &InputBox::point(&x)).unwrap();
        for eps in [0.01, 0.03, 0.1] {
            let cur = interval_forward(&m, &InputBox::linf_clipped(&x, eps).unwrap()).unwrap();
            for k in 0..cur.len() {
                assert!(cur.lo[k] <= prev.lo[k] + 1e-12 && cur.hi[k] >= prev.hi[k] - 1e-12);
            }
            prev = cur;
        }
    }
}
