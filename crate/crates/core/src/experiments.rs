//! Scripted studies: ellipsoid acceptance-rate scaling, total cost curves,
//! detection power of the insertion-rank tests, and the diamond-ring sampler
//! comparison.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::run_classic;
use crate::diagnostics::{ks_test, z_of, InsertionRecord};
use crate::error::{NestError, Result};
use crate::integrator::ShrinkageEstimator;
use crate::linalg::random_in_ball;
use crate::lrps::Lrps;
use crate::problems::{DiamondRing, Problem};
use crate::region::Ellipsoid;
use crate::rng_from_seed;
use crate::run::SamplerSpec;
use crate::special::{log_add_exp, log_unit_ball_volume};
use crate::termination::TerminationPolicy;

/// Independent per-task seed derived from a master seed and a counter.
pub fn task_seed(master: u64, counter: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(counter.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

/// Empirical ellipsoidal acceptance rate for N live points in d dimensions.
pub fn alpha_formula(d: usize, n: usize) -> f64 {
    let d = d as f64;
    (1.07 - d.ln() / 3.0) * (-(6.83 * d.powf(1.9) / n as f64).powf(0.75)).exp()
}

/// Live points suggested for ellipsoidal sampling in d dimensions.
pub fn suggested_live_points(d: usize, n_min: usize) -> usize {
    (7 * d * d).max(n_min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub d: usize,
    pub n: usize,
    pub measured_mean: f64,
    pub measured_sd: f64,
    pub formula: f64,
    pub note: Option<String>,
}

/// Acceptance rate of one bootstrapped ellipsoid fitted to N points drawn
/// uniformly from the unit d-ball: volume of the ball over the volume of
/// the constructed ellipsoid.
pub fn measure_alpha(d: usize, n: usize, rounds: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| random_in_ball(d, &mut rng)).collect();
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    let e = Ellipsoid::fit(&refs, rounds, &mut rng)?;
    Ok((log_unit_ball_volume(d) - e.log_volume()).exp())
}

pub fn acceptance_scaling(
    pairs: &[(usize, usize)],
    rounds: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<AlphaRow>> {
    if repeats < 2 {
        return Err(NestError::invalid("need at least 2 repeats"));
    }
    pairs
        .iter()
        .enumerate()
        .map(|(pi, &(d, n))| {
            let formula = if d > 0 && n > 0 {
                alpha_formula(d, n)
            } else {
                f64::NAN
            };
            if d == 0 || n <= d + 1 {
                return Ok(AlphaRow {
                    d,
                    n,
                    measured_mean: f64::NAN,
                    measured_sd: f64::NAN,
                    formula,
                    note: Some(format!(
                        "skipped: N={n} cannot define an ellipsoid in d={d}"
                    )),
                });
            }
            let vals = (0..repeats)
                .into_par_iter()
                .map(|r| measure_alpha(d, n, rounds, task_seed(seed, (pi * repeats + r) as u64)))
                .collect::<Result<Vec<f64>>>()?;
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            Ok(AlphaRow {
                d,
                n,
                measured_mean: m,
                measured_sd: var.sqrt(),
                formula,
                note: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    /// Every new parameter adds the same information: ln(Vp/Vt) = d ln K.
    pub cost_per_parameter_information: f64,
    /// Information independent of dimension: ln(Vp/Vt) = ln K.
    pub cost_fixed_information: f64,
}

/// Total cost C = N + N ln(Vp / (Vt eps)) / alpha for the two information
/// scalings, with N from the suggested live-point rule.
pub fn cost_curve(dims: &[usize], log_k: f64, epsilon: f64, n_min: usize) -> Result<Vec<CostRow>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(NestError::invalid("epsilon must lie in (0, 1)"));
    }
    Ok(dims
        .iter()
        .map(|&d| {
            let n = suggested_live_points(d, n_min);
            let alpha = alpha_formula(d, n);
            let nf = n as f64;
            let cost = |log_ratio: f64| nf + nf * (log_ratio - epsilon.ln()) / alpha;
            CostRow {
                d,
                n,
                alpha,
                cost_per_parameter_information: cost(d as f64 * log_k),
                cost_fixed_information: cost(log_k),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    /// Orders uniform over the lowest fraction `c` of the ranks.
    Coverage(f64),
    /// Orders floor(N u^s): a power-law tilt towards high ranks for s < 1.
    Slant(f64),
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Coverage(c) => format!("coverage\t{c}"),
            Scenario::Slant(s) => format!("slant\t{s}"),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> usize {
        match *self {
            Scenario::Coverage(c) => {
                let top = ((n as f64 * c).ceil() as usize).clamp(1, n);
                rng.random_range(0..top)
            }
            Scenario::Slant(s) => {
                let u: f64 = rng.random();
                ((n as f64 * u.powf(s)) as usize).min(n - 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub n: usize,
    pub scenario: Scenario,
    pub trials: usize,
    pub ks_fraction: f64,
    pub u_fraction: f64,
}

/// p-value equivalent of a two-sided 3 sigma excursion.
pub const THREE_SIGMA_P: f64 = 0.0027;

/// Fraction of trials (each N insertions with N live points) in which the
/// KS test and the U test detect a deviation at the 3 sigma level.
pub fn utest_power(
    n_list: &[usize],
    scenarios: &[Scenario],
    trials: usize,
    seed: u64,
) -> Result<Vec<PowerRow>> {
    if trials == 0 {
        return Err(NestError::invalid("need at least one trial"));
    }
    let mut rows = Vec::new();
    let mut counter = 0u64;
    for &n in n_list {
        if n < 5 {
            return Err(NestError::invalid("KS test needs N >= 5"));
        }
        for &sc in scenarios {
            let base = counter;
            counter += trials as u64;
            let hits = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = rng_from_seed(task_seed(seed, base + t as u64));
                    let recs: Vec<InsertionRecord> = (0..n)
                        .map(|_| InsertionRecord::new(sc.draw(n, &mut rng), n))
                        .collect::<Result<_>>()?;
                    let ks = ks_test(&recs)? < THREE_SIGMA_P;
                    let u = z_of(&recs)?.abs() > 3.0;
                    Ok((ks as usize, u as usize))
                })
                .collect::<Result<Vec<_>>>()?;
            let (ks, u) = hits.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            rows.push(PowerRow {
                n,
                scenario: sc,
                trials,
                ks_fraction: ks as f64 / trials as f64,
                u_fraction: u as f64 / trials as f64,
            });
        }
    }
    Ok(rows)
}

/// First stretch of at least `min_len` iterations over which the trace
/// rises by less than `flat_tol`, followed by a later rise above `rise`.
/// Returns (plateau start, plateau end).
pub fn detect_plateau_then_rise(
    trace: &[f64],
    min_len: usize,
    flat_tol: f64,
    rise: f64,
) -> Option<(usize, usize)> {
    let end = *trace.last()?;
    if min_len == 0 || trace.len() <= min_len {
        return None;
    }
    (0..trace.len() - min_len).find_map(|i| {
        let j = i + min_len;
        let flat = trace[j] - trace[i] < flat_tol && trace[i].is_finite();
        (flat && end - trace[j] > rise).then_some((i, j))
    })
}

/// Count rises in a step-count trace: block means over `block` iterations,
/// peaks above `factor` times the baseline (median of the first fifth),
/// separated by a drop of `STEP_RISE_HYSTERESIS` and a renewed climb.
pub fn count_rises(trace: &[usize], factor: f64, block: usize) -> (usize, f64) {
    if trace.is_empty() {
        return (0, 0.0);
    }
    let head = (trace.len() / 5).max(1);
    let mut first: Vec<usize> = trace[..head].to_vec();
    first.sort_unstable();
    let baseline = first[first.len() / 2].max(1) as f64;
    let threshold = factor * baseline;
    let smooth: Vec<f64> = trace
        .chunks(block.max(1))
        .map(|c| c.iter().sum::<usize>() as f64 / c.len() as f64)
        .collect();
    let h = STEP_RISE_HYSTERESIS;
    let mut rises = 0;
    let mut climbing = true;
    let mut peak = 0.0f64;
    let mut trough = f64::INFINITY;
    for &s in &smooth {
        if climbing {
            peak = peak.max(s);
            if peak > threshold && s <= h * peak {
                rises += 1;
                climbing = false;
                trough = s;
            }
        } else {
            trough = trough.min(s);
            if s > threshold && s * h >= trough {
                climbing = true;
                peak = s;
            }
        }
    }
    if climbing && peak > threshold {
        rises += 1;
    }
    (rises, baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub seed: u64,
    pub n_live: usize,
    pub evals: u64,
    pub ess: f64,
    pub log_z: f64,
    pub log_z_err: f64,
    pub oracle: f64,
    pub within_3_sigma: bool,
    /// Plateau in the accumulated log Z followed by a rise.
    pub plateau: Option<(usize, usize)>,
    pub step_rises: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub log_z_trace: Vec<f64>,
    #[serde(skip)]
    pub steps_trace: Vec<usize>,
}

impl BenchRow {
    pub fn ess_per_eval(&self) -> f64 {
        self.ess / self.evals.max(1) as f64
    }
}

pub const PLATEAU_FLAT_TOL: f64 = 0.01;
pub const PLATEAU_RISE: f64 = 0.1;
pub const STEP_RISE_FACTOR: f64 = 4.0;
pub const STEP_RISE_HYSTERESIS: f64 = 0.8;

/// One sampler configuration on the diamond ring.
pub fn diamond_ring_run(label: &str, spec: &SamplerSpec, n_live: usize, seed: u64) -> BenchRow {
    let problem = DiamondRing::default();
    let oracle = problem.analytic_log_z().unwrap_or(f64::NAN);
    let mut row = BenchRow {
        label: label.into(),
        seed,
        n_live,
        evals: 0,
        ess: f64::NAN,
        log_z: f64::NAN,
        log_z_err: f64::NAN,
        oracle,
        within_3_sigma: false,
        plateau: None,
        step_rises: 0,
        error: None,
        log_z_trace: Vec::new(),
        steps_trace: Vec::new(),
    };
    let run = spec.build().and_then(|s| {
        run_classic(
            &problem,
            n_live,
            TerminationPolicy::default(),
            s,
            ShrinkageEstimator::Arithmetic,
            seed,
        )
    });
    match run {
        Ok(run) => {
            let mut acc = f64::NEG_INFINITY;
            row.log_z_trace = run
                .state
                .dead_points
                .iter()
                .map(|d| {
                    acc = log_add_exp(acc, d.log_weight);
                    acc
                })
                .collect();
            row.steps_trace = run.agent.sampler.steps_trace().to_vec();
            row.evals = run.agent.evals;
            row.ess = run.result.effective_sample_size;
            row.log_z = run.result.log_evidence;
            row.log_z_err = run.result.log_evidence_uncertainty;
            row.within_3_sigma = (row.log_z - oracle).abs() <= 3.0 * row.log_z_err;
            row.plateau =
                detect_plateau_then_rise(&row.log_z_trace, n_live, PLATEAU_FLAT_TOL, PLATEAU_RISE);
            row.step_rises = count_rises(&row.steps_trace, STEP_RISE_FACTOR, (n_live / 2).max(1)).0;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Every (sampler, seed) combination, in parallel; rows keep input order.
pub fn diamond_ring_benchmark(
    samplers: &[(String, SamplerSpec)],
    n_live: usize,
    seeds: &[u64],
) -> Vec<BenchRow> {
    let jobs: Vec<(usize, u64)> = (0..samplers.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, s)| diamond_ring_run(&samplers[i].0, &samplers[i].1, n_live, s))
        .collect()
}

/// Sampler set used by the command-line benchmark.
pub fn default_diamond_samplers() -> Vec<(String, SamplerSpec)> {
    let step = |kind: &str, steps: usize, adapt: bool| SamplerSpec {
        kind: kind.into(),
        steps,
        adapt,
        region_filter: false,
    };
    vec![
        ("harm-auto".into(), step("harm", 4, true)),
        ("harm-64".into(), step("harm", 64, false)),
        ("mlfriends".into(), step("mlfriends", 1, false)),
    ]
}
