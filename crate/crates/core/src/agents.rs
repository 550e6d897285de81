//! Node-expanding agents.
//!
//! [`ClassicAgent`] grows the tree during integration and reproduces
//! constant-N nested sampling. The dynamic and posterior-weight agents work
//! on a finished tree and add new subtrees, after which the tree is simply
//! integrated again.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{InsertionRecord, PlateauWarnings, UTestAccumulator, DEFAULT_WINDOW};
use crate::error::{NestError, Result};
use crate::integrator::{
    integrate, ExpansionContext, Integrator, IntegratorState, NodeExpandingAgent, RunResult,
    ShrinkageEstimator,
};
use crate::lrps::{Lrps, LrpsRequest, Proposal, Sampler};
use crate::problems::Problem;
use crate::termination::{should_continue, PlateauMode, TerminationInput, TerminationPolicy};
use crate::tree::{ExplorationTree, NodeId, TreeSource, ROOT};
use crate::{rng_from_seed, NsRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Remainder,
    MaxIterations,
    /// Every live point shares the lowest likelihood.
    PlateauExhausted,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Remainder => "remainder",
            StopReason::MaxIterations => "max-iterations",
            StopReason::PlateauExhausted => "plateau-exhausted",
        }
    }
}

/// One accepted LRPS draw with its rank among the live points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionEvent {
    pub node: NodeId,
    pub iteration: usize,
    pub order: usize,
    pub live_count: usize,
    pub evals: u64,
}

/// Serializable part of the classic agent, used for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicAgentState {
    pub n_live: usize,
    pub floor: Option<usize>,
    pub policy: TerminationPolicy,
    pub sampler: Sampler,
    pub rng: NsRng,
    pub exhausted_at: Option<usize>,
    pub stop_reason: Option<StopReason>,
    pending: usize,
    pub insertions: Vec<InsertionEvent>,
    pub utest: UTestAccumulator,
    pub utest_rolling: UTestAccumulator,
    pub plateau: PlateauWarnings,
    pub evals: u64,
}

/// Constant-N agent: while the remainder is not negligible, replace every
/// removed node by one LRPS draw at its likelihood.
pub struct ClassicAgent<'p> {
    pub problem: &'p dyn Problem,
    pub state: ClassicAgentState,
}

impl<'p> ClassicAgent<'p> {
    pub fn new(
        problem: &'p dyn Problem,
        n_live: usize,
        policy: TerminationPolicy,
        sampler: Sampler,
        seed: u64,
    ) -> Result<Self> {
        if n_live == 0 {
            return Err(NestError::invalid("need at least one live point"));
        }
        policy.validate()?;
        Ok(ClassicAgent {
            problem,
            state: ClassicAgentState {
                n_live,
                floor: None,
                policy,
                sampler,
                rng: rng_from_seed(seed),
                exhausted_at: None,
                stop_reason: None,
                pending: 0,
                insertions: Vec::new(),
                utest: UTestAccumulator::new(),
                utest_rolling: UTestAccumulator::with_window(DEFAULT_WINDOW)?,
                plateau: PlateauWarnings::default(),
                evals: 0,
            },
        })
    }

    /// Keep at least `floor` live points until termination.
    pub fn with_floor(mut self, floor: usize) -> Self {
        self.state.floor = Some(floor);
        self
    }

    pub fn restore(problem: &'p dyn Problem, state: ClassicAgentState) -> Self {
        ClassicAgent { problem, state }
    }

    fn target_live(&self) -> usize {
        self.state.n_live.max(self.state.floor.unwrap_or(0))
    }

    fn draw(&mut self, threshold: f64, live: &[&[f64]], live_logl: &[f64]) -> Result<Proposal> {
        let req = LrpsRequest {
            threshold,
            live_unit: live,
            live_logl,
        };
        let p = self
            .state
            .sampler
            .sample(self.problem, &req, &mut self.state.rng)?;
        self.state.evals += p.evals;
        Ok(p)
    }

    /// Attach the initial live points below the root.
    pub fn seed_root(&mut self, tree: &mut ExplorationTree) -> Result<()> {
        if !tree.root().children.is_empty() {
            return Err(NestError::InvalidState("root already has children".into()));
        }
        if tree.dimension() != self.problem.dimension() {
            return Err(NestError::invalid("tree and problem dimensions differ"));
        }
        for _ in 0..self.target_live() {
            let p = self.draw(f64::NEG_INFINITY, &[], &[])?;
            tree.attach_child(ROOT, p.unit, p.physical, p.log_likelihood)?;
        }
        Ok(())
    }

    fn stop(&mut self, iteration: usize, reason: StopReason) {
        self.state.exhausted_at = Some(iteration);
        self.state.stop_reason = Some(reason);
    }
}

impl NodeExpandingAgent for ClassicAgent<'_> {
    fn expand(&mut self, ctx: &mut ExpansionContext<'_>) -> Result<()> {
        if self.state.exhausted_at.is_some() || !ctx.tree.node(ctx.node).children.is_empty() {
            return Ok(());
        }
        let iteration = ctx.iteration();
        let logl = ctx.tree.node(ctx.node).log_likelihood;

        // Exact ties with the next live point: remove without replacement
        // until the last tied node, then replenish all at once.
        if ctx.frontier.min().is_some_and(|(_, l)| l == logl) {
            let tied: Vec<NodeId> = ctx
                .frontier
                .iter()
                .take_while(|(_, l)| *l == logl)
                .map(|(id, _)| id)
                .collect();
            if self.state.pending == 0 {
                self.state.plateau.record(tied.len() + 1);
                if self.state.policy.plateau_mode == PlateauMode::Error {
                    let mut ids = vec![ctx.node];
                    ids.extend(tied);
                    return Err(NestError::PlateauDetected {
                        ids,
                        log_likelihood: logl,
                    });
                }
            }
            if tied.len() == ctx.frontier.len() {
                self.stop(iteration, StopReason::PlateauExhausted);
                return Ok(());
            }
            self.state.pending += 1;
            return Ok(());
        }

        let input = TerminationInput {
            iteration,
            log_evidence: ctx.state.log_evidence,
            log_volume_remaining: ctx.state.log_volume_remaining,
            log_l_max: ctx.log_l_max(),
            information_gain: ctx.state.information,
            n_live: ctx.n_live,
        };
        let decision = should_continue(&self.state.policy, &input);
        if !decision.proceed {
            let reason = match decision.reason {
                crate::termination::Reason::MaxIterations => StopReason::MaxIterations,
                _ => StopReason::Remainder,
            };
            self.stop(iteration, reason);
            return Ok(());
        }

        let mut count = self.state.pending + 1;
        self.state.pending = 0;
        if let Some(floor) = self.state.floor {
            count = count.max(floor.saturating_sub(ctx.frontier.len()));
        }
        for _ in 0..count {
            let ids = ctx.frontier.ids();
            let live: Vec<&[f64]> = ids
                .iter()
                .map(|&i| ctx.tree.node(i).point_unit.as_slice())
                .collect();
            let live_logl: Vec<f64> = ids
                .iter()
                .map(|&i| ctx.tree.node(i).log_likelihood)
                .collect();
            let p = self.draw(logl, &live, &live_logl)?;
            let order = ctx.frontier.count_below(p.log_likelihood);
            let live_count = ctx.frontier.len() + 1;
            let child = ctx.attach_child(ctx.node, p.unit, p.physical, p.log_likelihood)?;
            let rec = InsertionRecord::new(order, live_count)?;
            self.state.utest.push(rec);
            self.state.utest_rolling.push(rec);
            self.state.insertions.push(InsertionEvent {
                node: child,
                iteration,
                order,
                live_count,
                evals: p.evals,
            });
        }
        Ok(())
    }

    fn exhausted(&self) -> bool {
        self.state.exhausted_at.is_some()
    }
}

/// Run classic nested sampling from an empty tree.
pub fn run_classic(
    problem: &dyn Problem,
    n_live: usize,
    policy: TerminationPolicy,
    sampler: Sampler,
    estimator: ShrinkageEstimator,
    seed: u64,
) -> Result<ClassicRun> {
    let mut tree = ExplorationTree::new(problem.dimension())?;
    let mut agent = ClassicAgent::new(problem, n_live, policy, sampler, seed)?;
    agent.seed_root(&mut tree)?;
    let (state, result) =
        crate::integrator::integrate_with_agent(&mut tree, estimator, &mut agent)?;
    Ok(ClassicRun {
        tree,
        state,
        result,
        agent: agent.state,
    })
}

pub struct ClassicRun {
    pub tree: ExplorationTree,
    pub state: IntegratorState,
    pub result: RunResult,
    pub agent: ClassicAgentState,
}

/// sigma(log Z) = sqrt(sum 1/N_i^2).
pub fn live_count_sigma(history: &[usize]) -> f64 {
    history
        .iter()
        .map(|&n| 1.0 / (n as f64 * n as f64))
        .sum::<f64>()
        .sqrt()
}

/// Constant live count keeping sqrt(iterations / N^2) <= target for a run of
/// fixed length.
pub fn min_live_floor_fixed(iterations: usize, target_sigma: f64) -> Result<usize> {
    if !(target_sigma > 0.0) {
        return Err(NestError::invalid("target sigma must be positive"));
    }
    Ok(((iterations as f64).sqrt() / target_sigma).ceil() as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub floor: usize,
    /// Iterations per live point measured on the pilot run.
    pub iterations_per_live_point: f64,
    /// False when the floor exceeds the configured maximum.
    pub reachable: bool,
}

/// Live-point floor for a target sigma. Run length grows linearly with N,
/// so sum 1/N^2 = K / N with K = sum_i 1/N_i taken from a pilot history.
pub fn min_live_floor(
    pilot_history: &[usize],
    target_sigma: f64,
    max_live: usize,
) -> Result<FloorPlan> {
    if !(target_sigma > 0.0) {
        return Err(NestError::invalid("target sigma must be positive"));
    }
    if pilot_history.is_empty() {
        return Err(NestError::invalid("pilot history is empty"));
    }
    let k: f64 = pilot_history.iter().map(|&n| 1.0 / n as f64).sum();
    let floor = (k / (target_sigma * target_sigma)).ceil().max(1.0) as usize;
    Ok(FloorPlan {
        floor: floor.min(max_live),
        iterations_per_live_point: k,
        reachable: floor <= max_live,
    })
}

/// Live counts of the iterations before the agent stopped; the final drain
/// distributes leftover volume and carries no shrinkage noise.
pub fn pre_drain_history(state: &IntegratorState, exhausted_at: Option<usize>) -> Vec<usize> {
    let end = exhausted_at
        .unwrap_or(state.dead_points.len())
        .min(state.dead_points.len());
    state.dead_points[..end].iter().map(|d| d.n_live).collect()
}

/// Frontier (after removal) at the moment each wanted node was removed.
pub fn frontier_snapshots(
    tree: &ExplorationTree,
    wanted: &HashSet<NodeId>,
) -> Result<HashMap<NodeId, Vec<NodeId>>> {
    let mut out = HashMap::new();
    let mut integ = Integrator::new(tree, ShrinkageEstimator::Arithmetic)?;
    while out.len() < wanted.len() {
        let Some(dp) = integ.step(tree)? else { break };
        if wanted.contains(&dp.node) {
            let ids: Vec<NodeId> = integ
                .frontier()
                .iter()
                .filter(|&(id, _)| tree.node(id).parent != Some(dp.node))
                .map(|(id, _)| id)
                .collect();
            out.insert(dp.node, ids);
        }
    }
    Ok(out)
}

fn live_of(tree: &ExplorationTree, ids: &[NodeId]) -> (Vec<Vec<f64>>, Vec<f64>) {
    (
        ids.iter()
            .map(|&i| tree.node(i).point_unit.clone())
            .collect(),
        ids.iter().map(|&i| tree.node(i).log_likelihood).collect(),
    )
}

fn sample_at(
    problem: &dyn Problem,
    sampler: &mut Sampler,
    threshold: f64,
    live: &[Vec<f64>],
    live_logl: &[f64],
    rng: &mut NsRng,
) -> Result<Proposal> {
    let refs: Vec<&[f64]> = live.iter().map(|p| p.as_slice()).collect();
    sampler.sample(
        problem,
        &LrpsRequest {
            threshold,
            live_unit: &refs,
            live_logl,
        },
        rng,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicPolicy {
    pub n_new: usize,
    /// Weight of the posterior CDF in the mixture (the rest goes to the
    /// prior-volume CDF).
    pub posterior_mix: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub target_ess: Option<f64>,
    pub target_log_z_err: Option<f64>,
    pub max_rounds: usize,
}

impl Default for DynamicPolicy {
    fn default() -> Self {
        DynamicPolicy {
            n_new: 100,
            posterior_mix: 0.75,
            q_low: 0.10,
            q_high: 0.90,
            target_ess: Some(400.0),
            target_log_z_err: None,
            max_rounds: 20,
        }
    }
}

impl DynamicPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.posterior_mix) {
            return Err(NestError::invalid(
                "posterior mix weight must lie in [0, 1]",
            ));
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return Err(NestError::invalid("need 0 <= q_low < q_high <= 1"));
        }
        if self.n_new == 0 {
            return Err(NestError::invalid("need at least one new live point"));
        }
        Ok(())
    }
}

/// Likelihood bracket from the mixed CDF; node ids of the dead points at
/// the two quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub low_node: NodeId,
    pub log_l_low: f64,
    pub log_l_high: f64,
}

pub fn quantile_bracket(state: &IntegratorState, policy: &DynamicPolicy) -> Result<Bracket> {
    let dp = &state.dead_points;
    if dp.len() < 2 {
        return Err(NestError::invalid("base run needs at least 2 dead points"));
    }
    let lz = state.log_evidence;
    let mut post = 0.0;
    let mut cdf = Vec::with_capacity(dp.len());
    for d in dp {
        post += (d.log_weight - lz).exp();
        // Prior volume already passed, relative to the whole prior.
        let vol = -d.log_volume.exp_m1();
        cdf.push(policy.posterior_mix * post + (1.0 - policy.posterior_mix) * vol);
    }
    let total = *cdf.last().expect("non-empty");
    let find = |q: f64| cdf.partition_point(|&c| c < q * total).min(dp.len() - 1);
    let lo = find(policy.q_low);
    let hi = find(policy.q_high).max(lo);
    Ok(Bracket {
        low_node: dp[lo].node,
        log_l_low: dp[lo].log_likelihood,
        log_l_high: dp[hi].log_likelihood,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub bracket: Bracket,
    pub added: usize,
    pub evals: u64,
    pub result_before: (f64, f64),
    pub ess_after: f64,
    pub log_z_after: f64,
}

/// One round of dynamic expansion: start `n_new` threads below the node at
/// the low quantile and run them as a small nested sampling run until their
/// lowest point exceeds the high quantile.
pub fn dynamic_round(
    tree: &mut ExplorationTree,
    problem: &dyn Problem,
    sampler: &mut Sampler,
    policy: &DynamicPolicy,
    rng: &mut NsRng,
) -> Result<RoundReport> {
    policy.validate()?;
    let before_state = Integrator::new(&*tree, ShrinkageEstimator::Arithmetic)?.run(&*tree)?;
    let before = RunResult::from_state(&*tree, &before_state)?;
    let bracket = quantile_bracket(&before_state, policy)?;
    let anchor = bracket.low_node;
    let snap = frontier_snapshots(tree, &[anchor].into_iter().collect())?;
    let (geo_pts, geo_logl) = live_of(tree, &snap[&anchor]);
    sampler.invalidate();
    let start_evals = sampler.stats().evals;

    let mut live: Vec<NodeId> = Vec::with_capacity(policy.n_new);
    for _ in 0..policy.n_new {
        let p = sample_at(
            problem,
            sampler,
            bracket.log_l_low,
            &geo_pts,
            &geo_logl,
            rng,
        )?;
        live.push(tree.attach_child(anchor, p.unit, p.physical, p.log_likelihood)?);
    }
    let mut added = live.len();
    sampler.invalidate();
    loop {
        live.sort_by(|&a, &b| {
            let (la, lb) = (tree.node(a).log_likelihood, tree.node(b).log_likelihood);
            la.total_cmp(&lb).then(a.cmp(&b))
        });
        let lowest = live[0];
        let l_min = tree.node(lowest).log_likelihood;
        if l_min > bracket.log_l_high || live.len() < 2 {
            break;
        }
        live.remove(0);
        if live.iter().all(|&i| tree.node(i).log_likelihood == l_min) {
            break;
        }
        let (pts, logl) = live_of(tree, &live);
        let p = sample_at(problem, sampler, l_min, &pts, &logl, rng)?;
        live.push(tree.attach_child(lowest, p.unit, p.physical, p.log_likelihood)?);
        added += 1;
    }
    let after = integrate(&*tree, ShrinkageEstimator::Arithmetic)?;
    Ok(RoundReport {
        bracket,
        added,
        evals: sampler.stats().evals - start_evals,
        result_before: (before.log_evidence, before.effective_sample_size),
        ess_after: after.effective_sample_size,
        log_z_after: after.log_evidence,
    })
}

/// Repeat dynamic rounds until the ESS or log Z uncertainty target is met.
pub fn run_dynamic(
    tree: &mut ExplorationTree,
    problem: &dyn Problem,
    sampler: &mut Sampler,
    policy: &DynamicPolicy,
    rng: &mut NsRng,
) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    for _ in 0..policy.max_rounds {
        let r = integrate(&*tree, ShrinkageEstimator::Arithmetic)?;
        let ess_ok = policy
            .target_ess
            .is_none_or(|t| r.effective_sample_size >= t);
        let err_ok = policy
            .target_log_z_err
            .is_none_or(|t| r.log_evidence_uncertainty <= t);
        if ess_ok && err_ok {
            break;
        }
        reports.push(dynamic_round(tree, problem, sampler, policy, rng)?);
    }
    Ok(reports)
}

/// Add `count` siblings to nodes drawn with probability proportional to
/// their posterior weight. Returns the new node ids.
pub fn posterior_weight_expand(
    tree: &mut ExplorationTree,
    problem: &dyn Problem,
    sampler: &mut Sampler,
    count: usize,
    rng: &mut NsRng,
) -> Result<Vec<NodeId>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let result = integrate(&*tree, ShrinkageEstimator::Arithmetic)?;
    if result.posterior.is_empty() {
        return Err(NestError::invalid("no dead point carries posterior weight"));
    }
    let mut cdf = Vec::with_capacity(result.posterior.len());
    let mut acc = 0.0;
    for s in &result.posterior {
        acc += s.weight;
        cdf.push(acc);
    }
    let targets: Vec<NodeId> = (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            result.posterior[i].node
        })
        .collect();
    let parents: Vec<NodeId> = targets
        .iter()
        .map(|&t| tree.node(t).parent.expect("dead points are not the root"))
        .collect();
    let wanted: HashSet<NodeId> = parents.iter().copied().filter(|&p| p != ROOT).collect();
    let snaps = frontier_snapshots(tree, &wanted)?;
    sampler.invalidate();
    let mut new_ids = Vec::with_capacity(count);
    let mut last_parent = None;
    for &parent in &parents {
        if last_parent != Some(parent) {
            sampler.invalidate();
            last_parent = Some(parent);
        }
        let threshold = tree.node(parent).log_likelihood;
        let (pts, logl) = match snaps.get(&parent) {
            Some(ids) => live_of(tree, ids),
            None => (Vec::new(), Vec::new()),
        };
        let p = sample_at(problem, sampler, threshold, &pts, &logl, rng)?;
        new_ids.push(tree.attach_child(parent, p.unit, p.physical, p.log_likelihood)?);
    }
    Ok(new_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrps::PriorRejection;
    use crate::problems::Constant;

    #[test]
    fn constant_likelihood_drains_over_n_iterations() {
        let p = Constant { dim: 1 };
        let run = run_classic(
            &p,
            10,
            TerminationPolicy::default(),
            Sampler::Prior(PriorRejection::default()),
            ShrinkageEstimator::Arithmetic,
            1,
        )
        .unwrap();
        assert_eq!(run.state.dead_points.len(), 10);
        let hist = run.state.live_count_history();
        assert_eq!(hist, (1..=10).rev().collect::<Vec<_>>());
        assert!(run.result.log_evidence.abs() < 1e-10);
        assert_eq!(run.agent.stop_reason, Some(StopReason::PlateauExhausted));
    }

    #[test]
    fn plateau_error_mode() {
        let p = Constant { dim: 1 };
        let policy = TerminationPolicy {
            plateau_mode: PlateauMode::Error,
            ..Default::default()
        };
        let r = run_classic(
            &p,
            5,
            policy,
            Sampler::Prior(PriorRejection::default()),
            ShrinkageEstimator::Arithmetic,
            1,
        );
        assert!(matches!(r, Err(NestError::PlateauDetected { .. })));
    }

    #[test]
    fn floor_formulas() {
        assert!((live_count_sigma(&vec![100; 1000]) - 0.316).abs() < 1e-3);
        assert_eq!(min_live_floor_fixed(1000, 0.1).unwrap(), 317);
        assert!(min_live_floor_fixed(1000, 0.0).is_err());
        let plan = min_live_floor(&vec![50; 500], 0.1, 100000).unwrap();
        assert_eq!(plan.floor, 1000);
        assert!(
            !min_live_floor(&vec![50; 500], 0.01, 1000)
                .unwrap()
                .reachable
        );
    }
}
