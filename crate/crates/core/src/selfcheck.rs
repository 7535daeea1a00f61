//! Release self-check: oracle equivalence, sampled soundness, dominance over the
//! baseline, stationarity and max/min duality on seeded random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::baseline_directional_min;
use crate::certified::certified_directional_min;
use crate::error::Result;
use crate::harness::{draw_instance, trial_rng};
use crate::solver::{self, ScoreBox, ThresholdResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfCheckOptions {
    /// Instances per suite (per `K` for the oracle suite).
    pub trials: usize,
    pub seed: u64,
    /// Replace the solver by one that flips the sign of the direction, so every
    /// suite has something to catch.
    pub inject_fault: bool,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    /// `(K, trial)` of the first failing instance under the run's seed.
    pub first_failure: Option<(usize, usize)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Suite {
    report: SuiteReport,
}

impl Suite {
    fn new(name: &str) -> Self {
        Self {
            report: SuiteReport {
                name: name.to_string(),
                checked: 0,
                failures: 0,
                first_failure: None,
            },
        }
    }

    fn record(&mut self, ok: bool, k: usize, trial: usize) {
        self.report.checked += 1;
        if !ok {
            self.report.failures += 1;
            self.report.first_failure.get_or_insert((k, trial));
        }
    }
}

fn solve(c: &[f64], bx: &ScoreBox, fault: bool) -> Result<ThresholdResult> {
    if fault {
        solver::directional_max(c, bx)
    } else {
        solver::directional_min(c, bx)
    }
}

const SOUNDNESS_SAMPLES: usize = 200;

pub fn run_selfcheck(opts: &SelfCheckOptions) -> Result<Vec<SuiteReport>> {
    let fault = opts.inject_fault;
    let mut oracle = Suite::new("oracle-equivalence");
    let mut sound = Suite::new("soundness-sampling");
    let mut dom = Suite::new("dominance");
    let mut stat = Suite::new("stationarity");
    let mut dual = Suite::new("duality");

    for k in [2usize, 4, 8, 12] {
        for trial in 0..opts.trials {
            let mut rng = trial_rng(opts.seed, k, trial);
            let (c, bx) = draw_instance(k, 1.0, 1.0, &mut rng)?;
            let fast = solve(&c, &bx, fault)?;
            let exact = solver::exhaustive_vertex_min(&c, &bx)?;
            oracle.record((fast.value - exact.value).abs() <= 1e-6, k, trial);
        }
    }

    for trial in 0..opts.trials {
        let k = 2 + trial % 15;
        let mut rng = trial_rng(opts.seed ^ 0x5eed, k, trial);
        let (c, bx) = draw_instance(k, 1.0, 1.0, &mut rng)?;
        let fast = solve(&c, &bx, fault)?;
        let cert = certified_directional_min(&c, &bx)?;
        let mut ok = true;
        for _ in 0..SOUNDNESS_SAMPLES {
            let s: Vec<f64> = bx
                .ell()
                .iter()
                .zip(bx.u())
                .map(|(&l, &u)| if u > l { rng.random_range(l..=u) } else { l })
                .collect();
            let f = solver::softmax_objective(&c, &s)?;
            ok &= f >= fast.value - 1e-9 && f >= cert.lower;
        }
        sound.record(ok, k, trial);

        let base = baseline_directional_min(&c, &bx)?;
        dom.record(fast.value >= base - 1e-12, k, trial);

        let r = solver::stationarity_residual(&c, &fast.vertex, fast.value)?;
        stat.record(r <= 1e-9, k, trial);

        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        let upper = solver::directional_max(&c, &bx)?.value;
        let flipped = solve(&neg, &bx, fault)?.value;
        dual.record(upper == -flipped, k, trial);
    }

    Ok(vec![oracle.report, sound.report, dom.report, stat.report, dual.report])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_build_passes() {
        let opts = SelfCheckOptions {
            trials: 20,
            ..Default::default()
        };
        let reports = run_selfcheck(&opts).unwrap();
        assert_eq!(reports.len(), 5);
        assert!(reports.iter().all(SuiteReport::passed), "{reports:?}");
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SelfCheckOptions {
            trials: 20,
            inject_fault: true,
            ..Default::default()
        };
        let reports = run_selfcheck(&opts).unwrap();
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"oracle-equivalence"));
        assert!(failed.contains(&"soundness-sampling"));
        assert!(reports[0].first_failure.is_some());
    }
}
