//! Likelihood-restricted prior samplers behind one interface.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::linalg::Metric;
use crate::problems::Problem;
use crate::region::{Ellipsoid, MLFriends, Region, DEFAULT_BOOTSTRAP_ROUNDS};
use crate::step::{
    auto_tune_steps, gauss_walk_step, mean_pairwise_distance, slice_step, AutoTune, DirectionMode,
    StepGeometry, StepKind, StepSamplerConfig, WalkState,
};
use crate::NsRng;

pub const DEFAULT_BUDGET: u64 = 1_000_000;

/// Live points above the threshold, in unit-cube coordinates.
pub struct LrpsRequest<'a> {
    pub threshold: f64,
    pub live_unit: &'a [&'a [f64]],
    pub live_logl: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub unit: Vec<f64>,
    pub physical: Vec<f64>,
    pub log_likelihood: f64,
    pub evals: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrpsStats {
    pub calls: u64,
    pub evals: u64,
    pub proposals: u64,
    pub refits: u64,
    pub fallbacks: u64,
}

pub trait Lrps {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal>;

    /// Forget cached geometry, e.g. after the live set changed wholesale.
    fn invalidate(&mut self) {}

    fn stats(&self) -> &LrpsStats;

    /// Steps used per call, for samplers that tune them.
    fn steps_trace(&self) -> &[usize] {
        &[]
    }
}

fn uniform_point(d: usize, rng: &mut NsRng) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

/// Draw from `draw` until the likelihood exceeds the threshold.
fn rejection_loop(
    problem: &dyn Problem,
    threshold: f64,
    budget: u64,
    stats: &mut LrpsStats,
    rng: &mut NsRng,
    mut draw: impl FnMut(&mut NsRng) -> Option<Vec<f64>>,
    mut evaluate_ok: impl FnMut(f64) -> bool,
) -> Result<Proposal> {
    let mut proposals = 0u64;
    let mut evals = 0u64;
    while proposals < budget {
        proposals += 1;
        let Some(u) = draw(rng) else { continue };
        let (theta, l) = problem.evaluate(&u);
        evals += 1;
        if l > threshold && evaluate_ok(l) {
            stats.proposals += proposals;
            stats.evals += evals;
            return Ok(Proposal {
                unit: u,
                physical: theta,
                log_likelihood: l,
                evals,
            });
        }
    }
    stats.proposals += proposals;
    stats.evals += evals;
    Err(NestError::EfficiencyFailure {
        proposals,
        evaluations: evals,
        accepted: 0,
    })
}

/// Rejection from the whole prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorRejection {
    pub budget: Option<u64>,
    pub stats: LrpsStats,
}

impl Lrps for PriorRejection {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        self.stats.calls += 1;
        let d = problem.dimension();
        rejection_loop(
            problem,
            req.threshold,
            self.budget.unwrap_or(DEFAULT_BUDGET),
            &mut self.stats,
            rng,
            |r| Some(uniform_point(d, r)),
            |_| true,
        )
    }

    fn stats(&self) -> &LrpsStats {
        &self.stats
    }
}

/// Exact sampler for problems that expose contour bounding boxes:
/// uniform rejection inside the box. With `truncate = Some(f)` only the
/// innermost fraction `f` of each contour's volume is accepted, which
/// makes a deliberately biased sampler.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleSampler {
    pub truncate: Option<f64>,
    pub budget: Option<u64>,
    pub stats: LrpsStats,
}

impl OracleSampler {
    pub fn truncated(fraction: f64) -> Self {
        OracleSampler {
            truncate: Some(fraction),
            ..Default::default()
        }
    }
}

impl Lrps for OracleSampler {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        self.stats.calls += 1;
        let (lo, hi) = problem.contour_bounds(req.threshold).ok_or_else(|| {
            NestError::Unsupported(format!("{} has no contour bounds", problem.name()))
        })?;
        let limit = match self.truncate {
            Some(f) => {
                let lx = problem.log_volume_at(req.threshold).ok_or_else(|| {
                    NestError::Unsupported(format!("{} has no volume function", problem.name()))
                })?;
                Some(lx + f.ln())
            }
            None => None,
        };
        rejection_loop(
            problem,
            req.threshold,
            self.budget.unwrap_or(DEFAULT_BUDGET),
            &mut self.stats,
            rng,
            |r| {
                Some(
                    lo.iter()
                        .zip(&hi)
                        .map(|(a, b)| a + (b - a) * r.random::<f64>())
                        .collect(),
                )
            },
            |l| match limit {
                Some(lim) => problem.log_volume_at(l).is_some_and(|x| x <= lim),
                None => true,
            },
        )
    }

    fn stats(&self) -> &LrpsStats {
        &self.stats
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    Ellipsoid,
    MLFriends,
}

/// Rejection sampling from a region refitted every ceil(N/5) calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSampler {
    pub kind: RegionKind,
    pub bootstrap_rounds: usize,
    pub budget: u64,
    region: Option<Region>,
    /// Sample the cube and filter by membership when the region is larger
    /// than the cube.
    filter_cube: bool,
    calls_since_fit: usize,
    stale: bool,
    pub stats: LrpsStats,
}

impl RegionSampler {
    pub fn new(kind: RegionKind) -> Self {
        RegionSampler {
            kind,
            bootstrap_rounds: DEFAULT_BOOTSTRAP_ROUNDS,
            budget: DEFAULT_BUDGET,
            region: None,
            filter_cube: true,
            calls_since_fit: 0,
            stale: true,
            stats: LrpsStats::default(),
        }
    }

    pub fn region(&self) -> Option<&Region> {
        self.region.as_ref()
    }

    fn refit(&mut self, req: &LrpsRequest<'_>, rng: &mut NsRng) {
        self.stats.refits += 1;
        self.calls_since_fit = 0;
        self.stale = false;
        let fitted = match self.kind {
            RegionKind::Ellipsoid => {
                Ellipsoid::fit(req.live_unit, self.bootstrap_rounds, rng).map(Region::Ellipsoid)
            }
            RegionKind::MLFriends => {
                MLFriends::fit(req.live_unit, self.bootstrap_rounds, rng).map(Region::MLFriends)
            }
        };
        match fitted {
            Ok(r) => {
                self.filter_cube = r.log_volume_bound() >= 0.0;
                self.region = Some(r);
            }
            Err(_) => {
                // Plain prior rejection is always valid, just slower.
                self.stats.fallbacks += 1;
                self.region = None;
                self.filter_cube = true;
            }
        }
    }

    fn attempt(
        &mut self,
        problem: &dyn Problem,
        threshold: f64,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        let d = problem.dimension();
        let region = self.region.clone();
        let filter_cube = self.filter_cube;
        rejection_loop(
            problem,
            threshold,
            self.budget,
            &mut self.stats,
            rng,
            |r| match &region {
                None => Some(uniform_point(d, r)),
                Some(reg) if filter_cube => {
                    let u = uniform_point(d, r);
                    reg.contains(&u).unwrap_or(false).then_some(u)
                }
                Some(reg) => reg
                    .try_sample(r)
                    .filter(|u| u.iter().all(|&x| (0.0..=1.0).contains(&x))),
            },
            |_| true,
        )
    }
}

impl Lrps for RegionSampler {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        self.stats.calls += 1;
        let d = problem.dimension();
        if req.threshold == f64::NEG_INFINITY || req.live_unit.len() < 2 {
            let budget = self.budget;
            return rejection_loop(
                problem,
                req.threshold,
                budget,
                &mut self.stats,
                rng,
                |r| Some(uniform_point(d, r)),
                |_| true,
            );
        }
        let cadence = req.live_unit.len().div_ceil(5).max(1);
        if self.stale || self.calls_since_fit >= cadence {
            self.refit(req, rng);
        }
        self.calls_since_fit += 1;
        match self.attempt(problem, req.threshold, rng) {
            Err(NestError::EfficiencyFailure { .. }) if self.calls_since_fit > 1 => {
                self.refit(req, rng);
                self.calls_since_fit = 1;
                self.attempt(problem, req.threshold, rng)
            }
            other => other,
        }
    }

    fn invalidate(&mut self) {
        self.stale = true;
    }

    fn stats(&self) -> &LrpsStats {
        &self.stats
    }
}

/// Random walk started at a random live point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSampler {
    pub config: StepSamplerConfig,
    scale: f64,
    steps: usize,
    metric: Option<Metric>,
    reference_distance: f64,
    region: Option<Region>,
    calls_since_refresh: usize,
    stale: bool,
    pub steps_history: Vec<usize>,
    pub stats: LrpsStats,
}

impl StepSampler {
    pub fn new(config: StepSamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(StepSampler {
            scale: config.scale,
            steps: config.steps_per_sample,
            config,
            metric: None,
            reference_distance: 0.0,
            region: None,
            calls_since_refresh: 0,
            stale: true,
            steps_history: Vec::new(),
            stats: LrpsStats::default(),
        })
    }

    pub fn current_steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn refresh(&mut self, req: &LrpsRequest<'_>, rng: &mut NsRng) {
        self.stale = false;
        self.calls_since_refresh = 0;
        self.stats.refits += 1;
        let d = req.live_unit[0].len();
        let metric = Metric::fit(req.live_unit).unwrap_or_else(|_| {
            self.stats.fallbacks += 1;
            diagonal_metric(req.live_unit).unwrap_or_else(|| Metric::identity(d))
        });
        if self.config.auto_tune == AutoTune::MoveDistance {
            self.reference_distance = mean_pairwise_distance(req.live_unit, &metric);
        }
        self.region = if self.config.region_filter {
            MLFriends::fit(req.live_unit, DEFAULT_BOOTSTRAP_ROUNDS, rng)
                .ok()
                .map(Region::MLFriends)
        } else {
            None
        };
        self.metric = Some(metric);
    }
}

fn diagonal_metric(points: &[&[f64]]) -> Option<Metric> {
    let d = points[0].len();
    let (_, cov) = crate::linalg::covariance(points);
    let mut diag = vec![0.0; d * d];
    for i in 0..d {
        diag[i * d + i] = cov[i * d + i];
    }
    Metric::from_covariance(&diag, d).ok()
}

impl Lrps for StepSampler {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        self.stats.calls += 1;
        let d = problem.dimension();
        if req.threshold == f64::NEG_INFINITY || req.live_unit.is_empty() {
            return rejection_loop(
                problem,
                req.threshold,
                DEFAULT_BUDGET,
                &mut self.stats,
                rng,
                |r| Some(uniform_point(d, r)),
                |_| true,
            );
        }
        let cadence = req.live_unit.len().div_ceil(5).max(1);
        if self.stale || self.calls_since_refresh >= cadence || self.metric.is_none() {
            self.refresh(req, rng);
        }
        self.calls_since_refresh += 1;
        let candidates: Vec<usize> = (0..req.live_unit.len())
            .filter(|&i| req.live_logl[i] > req.threshold)
            .collect();
        if candidates.is_empty() {
            return Err(NestError::InvalidState(
                "no live point strictly above the threshold to start a walk".into(),
            ));
        }
        let start_idx = candidates[rng.random_range(0..candidates.len())];
        let start = req.live_unit[start_idx].to_vec();
        let mut state = WalkState::new(
            start.clone(),
            problem.transform(&start),
            req.live_logl[start_idx],
        );
        let metric = self.metric.as_ref().expect("refreshed");
        let geo = StepGeometry {
            metric,
            region: self.region.as_ref(),
        };
        let steps = self.steps;
        match self.config.kind {
            StepKind::GaussWalk => {
                for _ in 0..steps {
                    self.scale =
                        gauss_walk_step(&mut state, self.scale, &geo, req.threshold, problem, rng);
                }
            }
            kind => {
                let mode = match kind {
                    StepKind::SliceAxis => DirectionMode::Axis,
                    StepKind::HarmSphere => DirectionMode::RandomSphere,
                    _ => DirectionMode::Covariance,
                };
                for _ in 0..steps {
                    if let Err(e) = slice_step(&mut state, mode, &geo, req.threshold, problem, rng)
                    {
                        self.stats.evals += state.likelihood_evals;
                        return Err(e);
                    }
                }
            }
        }
        self.stats.evals += state.likelihood_evals;
        self.stats.proposals += (state.accepts + state.rejects) as u64;
        self.steps_history.push(steps);
        if self.config.auto_tune == AutoTune::MoveDistance {
            self.steps = auto_tune_steps(
                steps,
                state.accumulated_displacement,
                self.reference_distance,
                self.config.max_steps,
            );
        }
        Ok(Proposal {
            unit: state.current,
            physical: state.current_physical,
            log_likelihood: state.current_logl,
            evals: state.likelihood_evals,
        })
    }

    fn invalidate(&mut self) {
        self.stale = true;
    }

    fn stats(&self) -> &LrpsStats {
        &self.stats
    }

    fn steps_trace(&self) -> &[usize] {
        &self.steps_history
    }
}

/// Every sampler in one serializable type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Prior(PriorRejection),
    Oracle(OracleSampler),
    Region(RegionSampler),
    Step(StepSampler),
}

impl Sampler {
    pub fn ellipsoid() -> Self {
        Sampler::Region(RegionSampler::new(RegionKind::Ellipsoid))
    }

    pub fn mlfriends() -> Self {
        Sampler::Region(RegionSampler::new(RegionKind::MLFriends))
    }

    pub fn step(config: StepSamplerConfig) -> Result<Self> {
        Ok(Sampler::Step(StepSampler::new(config)?))
    }

    fn inner(&self) -> &dyn Lrps {
        match self {
            Sampler::Prior(s) => s,
            Sampler::Oracle(s) => s,
            Sampler::Region(s) => s,
            Sampler::Step(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Lrps {
        match self {
            Sampler::Prior(s) => s,
            Sampler::Oracle(s) => s,
            Sampler::Region(s) => s,
            Sampler::Step(s) => s,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Sampler::Prior(_) => "prior".into(),
            Sampler::Oracle(o) if o.truncate.is_some() => "truncated-oracle".into(),
            Sampler::Oracle(_) => "oracle".into(),
            Sampler::Region(r) => match r.kind {
                RegionKind::Ellipsoid => "ellipsoid".into(),
                RegionKind::MLFriends => "mlfriends".into(),
            },
            Sampler::Step(s) => match s.config.kind {
                StepKind::GaussWalk => "gauss".into(),
                StepKind::SliceAxis => "slice".into(),
                StepKind::HarmSphere => "harm-sphere".into(),
                StepKind::Harm => "harm".into(),
            },
        }
    }
}

impl Lrps for Sampler {
    fn sample(
        &mut self,
        problem: &dyn Problem,
        req: &LrpsRequest<'_>,
        rng: &mut NsRng,
    ) -> Result<Proposal> {
        self.inner_mut().sample(problem, req, rng)
    }

    fn invalidate(&mut self) {
        self.inner_mut().invalidate()
    }

    fn stats(&self) -> &LrpsStats {
        self.inner().stats()
    }

    fn steps_trace(&self) -> &[usize] {
        self.inner().steps_trace()
    }
}
