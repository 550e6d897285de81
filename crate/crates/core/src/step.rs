//! Random-walk moves inside a likelihood contour: Gaussian proposals with
//! accept/reject scale adaptation, and slice moves along axes or random
//! directions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::linalg::{random_direction, Metric};
use crate::problems::Problem;
use crate::region::Region;

pub const STUCK_WIDTH: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    GaussWalk,
    SliceAxis,
    /// Slice along a uniformly random direction.
    HarmSphere,
    /// Slice along a random direction shaped by the live-point covariance.
    Harm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AutoTune {
    #[default]
    Off,
    MoveDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSamplerConfig {
    pub kind: StepKind,
    pub steps_per_sample: usize,
    /// Initial Gaussian proposal scale, in units of the live-point spread.
    pub scale: f64,
    pub auto_tune: AutoTune,
    pub region_filter: bool,
    /// Upper bound for auto-tuned step counts.
    pub max_steps: usize,
}

impl StepSamplerConfig {
    pub fn new(kind: StepKind, steps: usize) -> Self {
        StepSamplerConfig {
            kind,
            steps_per_sample: steps,
            scale: 0.5,
            auto_tune: AutoTune::Off,
            region_filter: false,
            max_steps: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_sample == 0 {
            return Err(NestError::invalid("steps per sample must be >= 1"));
        }
        if !(self.scale > 0.0) {
            return Err(NestError::invalid("scale must be positive"));
        }
        if self.max_steps < self.steps_per_sample {
            return Err(NestError::invalid("max steps below steps per sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkState {
    pub current: Vec<f64>,
    pub current_physical: Vec<f64>,
    pub current_logl: f64,
    pub steps_taken: usize,
    pub likelihood_evals: u64,
    pub accepts: usize,
    pub rejects: usize,
    /// Mahalanobis path length of accepted moves.
    pub accumulated_displacement: f64,
}

impl WalkState {
    pub fn new(current: Vec<f64>, current_physical: Vec<f64>, current_logl: f64) -> Self {
        WalkState {
            current,
            current_physical,
            current_logl,
            steps_taken: 0,
            likelihood_evals: 0,
            accepts: 0,
            rejects: 0,
            accumulated_displacement: 0.0,
        }
    }
}

/// Geometry shared by every move: live-point metric and optional region.
pub struct StepGeometry<'a> {
    pub metric: &'a Metric,
    pub region: Option<&'a Region>,
}

impl StepGeometry<'_> {
    fn admissible(&self, p: &[f64]) -> bool {
        p.iter().all(|&x| (0.0..=1.0).contains(&x))
            && self.region.is_none_or(|r| r.contains(p).unwrap_or(false))
    }
}

/// Scale update after one proposal, with running counts that include it.
pub fn sivia_update(scale: f64, accepts: usize, rejects: usize) -> f64 {
    if accepts > rejects {
        scale * (1.0 / accepts as f64).exp()
    } else {
        scale / (1.0 / rejects.max(1) as f64).exp()
    }
}

fn try_point(
    state: &mut WalkState,
    p: Vec<f64>,
    geo: &StepGeometry<'_>,
    threshold: f64,
    problem: &dyn Problem,
) -> bool {
    if !geo.admissible(&p) {
        return false;
    }
    let (theta, l) = problem.evaluate(&p);
    state.likelihood_evals += 1;
    if l > threshold {
        state.accumulated_displacement += geo.metric.distance_sq(&p, &state.current).sqrt();
        state.current = p;
        state.current_physical = theta;
        state.current_logl = l;
        true
    } else {
        false
    }
}

/// One Gaussian proposal `x + scale * L z`; returns the adapted scale.
pub fn gauss_walk_step<R: Rng + ?Sized>(
    state: &mut WalkState,
    scale: f64,
    geo: &StepGeometry<'_>,
    threshold: f64,
    problem: &dyn Problem,
    rng: &mut R,
) -> f64 {
    let d = state.current.len();
    let z: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let delta = geo.metric.colour(&z);
    let p: Vec<f64> = state
        .current
        .iter()
        .zip(&delta)
        .map(|(x, dx)| x + scale * dx)
        .collect();
    if try_point(state, p, geo, threshold, problem) {
        state.accepts += 1;
    } else {
        state.rejects += 1;
    }
    state.steps_taken += 1;
    sivia_update(scale, state.accepts, state.rejects)
}

/// Parameter range `[lo, hi]` (lo <= 0 <= hi) keeping `x + t v` in the cube.
pub fn cube_chord(x: &[f64], v: &[f64]) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (&xi, &vi) in x.iter().zip(v) {
        if vi > 0.0 {
            lo = lo.max(-xi / vi);
            hi = hi.min((1.0 - xi) / vi);
        } else if vi < 0.0 {
            lo = lo.max((1.0 - xi) / vi);
            hi = hi.min(-xi / vi);
        }
    }
    (lo.min(0.0), hi.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionMode {
    Axis,
    RandomSphere,
    Covariance,
}

/// One slice move: pick a direction, bracket with the full cube chord,
/// shrink towards the current point on each reject.
pub fn slice_step<R: Rng + ?Sized>(
    state: &mut WalkState,
    mode: DirectionMode,
    geo: &StepGeometry<'_>,
    threshold: f64,
    problem: &dyn Problem,
    rng: &mut R,
) -> Result<()> {
    let d = state.current.len();
    let v = match mode {
        DirectionMode::Axis => {
            let mut v = vec![0.0; d];
            v[rng.random_range(0..d)] = 1.0;
            v
        }
        DirectionMode::RandomSphere => random_direction(d, rng),
        DirectionMode::Covariance => {
            let v = geo.metric.colour(&random_direction(d, rng));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        }
    };
    let (mut lo, mut hi) = cube_chord(&state.current, &v);
    loop {
        if hi - lo < STUCK_WIDTH {
            return Err(NestError::StuckWalker { width: hi - lo });
        }
        let t = lo + (hi - lo) * rng.random::<f64>();
        let p: Vec<f64> = state
            .current
            .iter()
            .zip(&v)
            .map(|(x, vi)| x + t * vi)
            .collect();
        if try_point(state, p, geo, threshold, problem) {
            state.accepts += 1;
            state.steps_taken += 1;
            return Ok(());
        }
        state.rejects += 1;
        if t < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
    }
}

/// Mean Mahalanobis distance over all pairs of points.
pub fn mean_pairwise_distance(points: &[&[f64]], metric: &Metric) -> f64 {
    let w: Vec<Vec<f64>> = points.iter().map(|p| metric.whiten(p)).collect();
    let n = w.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += crate::linalg::sq_dist(&w[i], &w[j]).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Move-distance rule: double the steps if the walk did not travel the
/// reference distance, otherwise decrease by one (floor 1).
pub fn auto_tune_steps(steps: usize, displacement: f64, reference: f64, max_steps: usize) -> usize {
    if displacement < reference {
        (steps * 2).min(max_steps)
    } else {
        steps.saturating_sub(1).max(1)
    }
}
