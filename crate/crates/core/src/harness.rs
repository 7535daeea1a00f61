//! Synthetic instances, feasible-point attacks and the bound-versus-attack sweep.
//!
//! Every random draw comes from ChaCha8 keyed by `ChaCha8Rng::seed_from_u64(seed)`
//! with stream number `(K << 32) | trial`, so instances are identical across
//! platforms and independent of execution order. Within a stream the draws are:
//! `K` centers `N(0, 1)`, then `K` half-widths `width_scale * U(0, 1)`, then `K`
//! coefficients `coeff_scale * N(0, 1)`; the attack continues on the same stream.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseline::baseline_directional_min;
use crate::certified::certified_directional_min;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{AttentionModelSpec, InputBox};
use crate::solver::{self, ScoreBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub width_scale: f64,
    pub coeff_scale: f64,
    /// Random samples per attack.
    pub budget: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![4, 8, 16, 32, 64, 128],
            trials: 100,
            seed: 0,
            width_scale: 0.5,
            coeff_scale: 1.0,
            budget: 200,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        if self.ks.contains(&0) {
            return Err(Error::InvalidArgument("every K must be at least 1".into()));
        }
        if !(self.width_scale >= 0.0 && self.width_scale.is_finite()) {
            return Err(Error::InvalidArgument("width scale must be finite and >= 0".into()));
        }
        if !self.coeff_scale.is_finite() {
            return Err(Error::InvalidArgument("coefficient scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vertex,
    Baseline,
    Certified,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vertex, Method::Baseline, Method::Certified];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vertex => "vertex",
            Method::Baseline => "baseline",
            Method::Certified => "certified",
        }
    }

    pub fn lower_bound(self, c: &[f64], bx: &ScoreBox) -> Result<f64> {
        match self {
            Method::Vertex => Ok(solver::directional_min(c, bx)?.value),
            Method::Baseline => baseline_directional_min(c, bx),
            Method::Certified => certified_directional_min(c, bx)?.certificate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    #[serde(rename = "K")]
    pub k: usize,
    pub trial: usize,
    pub method: Method,
    pub lower: f64,
    pub attack: f64,
    pub gap: f64,
    pub time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub method: Method,
    pub cert_rate: f64,
    pub mean_lower: f64,
    pub mean_gap: f64,
    pub total_time_s: f64,
}

/// Random stream for instance `(k, trial)` under `seed`.
pub fn trial_rng(seed: u64, k: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | trial as u64);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw one instance from `rng` (see the module docs for the draw order).
pub fn draw_instance(k: usize, width_scale: f64, coeff_scale: f64, rng: &mut impl Rng) -> Result<(Vec<f64>, ScoreBox)> {
    let centers: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
    let half: Vec<f64> = (0..k).map(|_| width_scale * rng.random::<f64>()).collect();
    let c: Vec<f64> = (0..k).map(|_| coeff_scale * normal(rng)).collect();
    let ell = centers.iter().zip(&half).map(|(m, h)| m - h).collect();
    let u = centers.iter().zip(&half).map(|(m, h)| m + h).collect();
    Ok((c, ScoreBox::new(ell, u)?))
}

/// Deterministic instance `(c, box)` for `(k, seed, trial)`.
pub fn synth_instance(k: usize, seed: u64, trial: usize, width_scale: f64, coeff_scale: f64) -> Result<(Vec<f64>, ScoreBox)> {
    draw_instance(k, width_scale, coeff_scale, &mut trial_rng(seed, k, trial))
}

fn uniform_in(lo: &[f64], hi: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
        .collect()
}

/// Endpoint coordinate descent: repeatedly move single coordinates to whichever
/// endpoint lowers `f`, until a full pass makes no progress or `passes` run out.
fn endpoint_descent(x: &mut [f64], best: &mut f64, lo: &[f64], hi: &[f64], passes: usize, f: &mut impl FnMut(&[f64]) -> Result<f64>) -> Result<()> {
    for _ in 0..passes {
        let mut improved = false;
        for j in 0..x.len() {
            if lo[j] == hi[j] {
                continue;
            }
            for cand in [lo[j], hi[j]] {
                if cand == x[j] {
                    continue;
                }
                let prev = x[j];
                x[j] = cand;
                let v = f(x)?;
                if v < *best {
                    *best = v;
                    improved = true;
                } else {
                    x[j] = prev;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(())
}

/// Smallest `c^T softmax(s)` found over feasible `s`: the `K + 1` threshold
/// vertices of `c` and of `-c`, the box center, `budget` uniform samples, then an
/// endpoint coordinate descent from the best point.
pub fn attack_min_objective(c: &[f64], bx: &ScoreBox, budget: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    attack_objective_with(c, bx, budget, &mut rng)
}

fn attack_objective_with(c: &[f64], bx: &ScoreBox, budget: usize, rng: &mut impl Rng) -> Result<f64> {
    solver::validate_direction(c, bx.len())?;
    let k = c.len();
    let neg: Vec<f64> = c.iter().map(|x| -x).collect();
    let mut best_x: Vec<f64> = bx.ell().iter().zip(bx.u()).map(|(l, u)| 0.5 * (l + u)).collect();
    let mut best = solver::softmax_objective(c, &best_x)?;
    let consider = |x: Vec<f64>, best: &mut f64, best_x: &mut Vec<f64>| -> Result<()> {
        let v = solver::softmax_objective(c, &x)?;
        if v < *best {
            *best = v;
            *best_x = x;
        }
        Ok(())
    };
    for dir in [c, &neg[..]] {
        for m in 0..=k {
            consider(solver::threshold_vertex(dir, bx, m)?, &mut best, &mut best_x)?;
        }
    }
    for _ in 0..budget {
        consider(uniform_in(bx.ell(), bx.u(), rng), &mut best, &mut best_x)?;
    }
    let mut f = |x: &[f64]| solver::softmax_objective(c, x);
    endpoint_descent(&mut best_x, &mut best, bx.ell(), bx.u(), 4, &mut f)?;
    Ok(best)
}

/// Smallest margin `logit_y - logit_t` found over the input box: box center,
/// both extreme corners, `budget` samples (alternating uniform interior points and
/// random corners), then two passes of endpoint coordinate descent.
pub fn attack_min_margin(model: &AttentionModelSpec, ib: &InputBox, y: usize, t: usize, budget: usize, seed: u64) -> Result<f64> {
    if ib.len() != model.input_dim() {
        return Err(Error::LengthMismatch {
            what: "input box",
            expected: model.input_dim(),
            found: ib.len(),
        });
    }
    if y >= model.classes || t >= model.classes {
        return Err(Error::InvalidArgument(format!("classes ({y}, {t}) out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut margin = |x: &[f64]| model.margin(x, y, t);
    let center: Vec<f64> = ib.lo.iter().zip(&ib.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let mut best_x = center.clone();
    let mut best = margin(&center)?;
    let mut candidates = vec![ib.lo.clone(), ib.hi.clone()];
    for s in 0..budget {
        candidates.push(if s % 2 == 0 {
            uniform_in(&ib.lo, &ib.hi, &mut rng)
        } else {
            ib.lo
                .iter()
                .zip(&ib.hi)
                .map(|(&l, &h)| if rng.random::<bool>() { h } else { l })
                .collect()
        });
    }
    for x in candidates {
        let v = margin(&x)?;
        if v < best {
            best = v;
            best_x = x;
        }
    }
    endpoint_descent(&mut best_x, &mut best, &ib.lo, &ib.hi, 2, &mut margin)?;
    Ok(best)
}

/// Runs every method on every `(K, trial)` instance. Records come back ordered by
/// `(K, trial, method)` regardless of `exec`.
pub fn run_sweep(cfg: &SweepConfig, exec: Exec) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .ks
        .iter()
        .flat_map(|&k| (0..cfg.trials).map(move |t| (k, t)))
        .collect();
    let per_job = exec.map(&jobs, |&(k, trial)| -> Result<Vec<TrialRecord>> {
        let mut rng = trial_rng(cfg.seed, k, trial);
        let (c, bx) = draw_instance(k, cfg.width_scale, cfg.coeff_scale, &mut rng)?;
        let attack = attack_objective_with(&c, &bx, cfg.budget, &mut rng)?;
        Method::ALL
            .iter()
            .map(|&method| {
                let start = Instant::now();
                let lower = method.lower_bound(&c, &bx)?;
                let time_us = start.elapsed().as_secs_f64() * 1e6;
                Ok(TrialRecord {
                    k,
                    trial,
                    method,
                    lower,
                    attack,
                    gap: attack - lower,
                    time_us,
                })
            })
            .collect()
    });
    let mut out = Vec::with_capacity(jobs.len() * Method::ALL.len());
    for r in per_job {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-`(K, method)` means, ordered by first appearance of `K` then method.
/// A synthetic trial counts as certified when its lower bound is positive.
pub fn aggregate(records: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(usize, Method)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.k, r.method)) {
            keys.push((r.k, r.method));
        }
    }
    keys.sort_by_key(|&(k, m)| (records.iter().position(|r| r.k == k).unwrap_or(0), m));
    keys.into_iter()
        .map(|(k, method)| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.k == k && r.method == method).collect();
            let n = rows.len() as f64;
            AggregateRow {
                k,
                method,
                cert_rate: rows.iter().filter(|r| r.lower > 0.0).count() as f64 / n,
                mean_lower: rows.iter().map(|r| r.lower).sum::<f64>() / n,
                mean_gap: rows.iter().map(|r| r.gap).sum::<f64>() / n,
                total_time_s: rows.iter().map(|r| r.time_us).sum::<f64>() * 1e-6,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(rows: &[T], header: &[&str], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

pub fn write_trials_csv(records: &[TrialRecord], out: impl Write) -> Result<()> {
    write_csv(records, &["K", "trial", "method", "lower", "attack", "gap", "time_us"], out)
}

pub fn write_aggregate_csv(rows: &[AggregateRow], out: impl Write) -> Result<()> {
    write_csv(rows, &["K", "method", "cert_rate", "mean_lower", "mean_gap", "total_time_s"], out)
}
