//! Breadth-first integration over an exploration tree.
//!
//! The frontier holds nodes sorted by likelihood (ties broken by id). Each step
//! removes the lowest node, assigns it the shell of prior volume given by the
//! shrinkage estimator, lets an optional agent add children, and finally
//! pushes the node's children onto the frontier.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::special::{log1m_exp, log_add_exp, log_sum_exp};
use crate::tree::{ExplorationTree, NodeId, Reattach, TreeSource, ROOT};
use crate::{rng_from_seed, NsRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShrinkageEstimator {
    #[default]
    Arithmetic,
    Geometric,
    Stochastic {
        seed: u64,
    },
}

/// Log of the removed and retained volume fractions for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shrink {
    pub log_removed: f64,
    pub log_remaining: f64,
}

impl Shrink {
    fn arithmetic(n: usize) -> Self {
        let n = n as f64;
        Shrink {
            log_removed: -(n + 1.0).ln(),
            log_remaining: (n / (n + 1.0)).ln(),
        }
    }

    fn geometric(n: usize) -> Self {
        let r = -1.0 / n as f64;
        Shrink {
            log_removed: log1m_exp(r),
            log_remaining: r,
        }
    }

    /// Retained fraction `u^{1/N}` is Beta(N, 1).
    fn stochastic<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let r = u.ln() / n as f64;
        Shrink {
            log_removed: if r == 0.0 {
                f64::NEG_INFINITY
            } else {
                log1m_exp(r)
            },
            log_remaining: r,
        }
    }

    /// Equal split of the remaining volume among `n` final points.
    fn drain(n: usize) -> Self {
        let nf = n as f64;
        Shrink {
            log_removed: -nf.ln(),
            log_remaining: if n == 1 {
                f64::NEG_INFINITY
            } else {
                ((nf - 1.0) / nf).ln()
            },
        }
    }
}

/// Fraction of the current volume removed in one iteration with `n` live points.
pub fn shrink_fraction<R: Rng + ?Sized>(
    estimator: ShrinkageEstimator,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(NestError::invalid("live point count must be at least 1"));
    }
    Ok(match estimator {
        ShrinkageEstimator::Arithmetic => 1.0 / (n as f64 + 1.0),
        ShrinkageEstimator::Geometric => -(-1.0 / n as f64).exp_m1(),
        ShrinkageEstimator::Stochastic { .. } => Shrink::stochastic(n, rng).log_removed.exp(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadPoint {
    pub node: NodeId,
    pub log_likelihood: f64,
    /// Remaining volume after this point's shell was removed.
    pub log_volume: f64,
    pub log_weight: f64,
    pub n_live: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorState {
    pub log_volume_remaining: f64,
    pub log_evidence: f64,
    /// Running information gain estimate.
    pub information: f64,
    pub dead_points: Vec<DeadPoint>,
}

impl Default for IntegratorState {
    fn default() -> Self {
        IntegratorState {
            log_volume_remaining: 0.0,
            log_evidence: f64::NEG_INFINITY,
            information: 0.0,
            dead_points: Vec::new(),
        }
    }
}

impl IntegratorState {
    pub fn iteration(&self) -> usize {
        self.dead_points.len()
    }

    pub fn live_count_history(&self) -> Vec<usize> {
        self.dead_points.iter().map(|d| d.n_live).collect()
    }

    fn accumulate(&mut self, dp: DeadPoint) {
        let z_old = self.log_evidence;
        let z_new = log_add_exp(z_old, dp.log_weight);
        if z_new > f64::NEG_INFINITY {
            let a = if dp.log_weight > f64::NEG_INFINITY {
                (dp.log_weight - z_new).exp() * dp.log_likelihood
            } else {
                0.0
            };
            let b = if z_old > f64::NEG_INFINITY {
                (z_old - z_new).exp() * (self.information + z_old)
            } else {
                0.0
            };
            self.information = a + b - z_new;
        }
        self.log_evidence = z_new;
        self.log_volume_remaining = dp.log_volume;
        self.dead_points.push(dp);
    }
}

/// H = sum_i w_i (log L_i - log Z), with normalized weights.
pub fn information_gain(state: &IntegratorState) -> f64 {
    let lz = state.log_evidence;
    if lz == f64::NEG_INFINITY {
        return 0.0;
    }
    let h: f64 = state
        .dead_points
        .iter()
        .filter(|d| d.log_weight > f64::NEG_INFINITY)
        .map(|d| (d.log_weight - lz).exp() * (d.log_likelihood - lz))
        .sum();
    h.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub node: NodeId,
    pub point_unit: Vec<f64>,
    pub point_physical: Vec<f64>,
    pub log_likelihood: f64,
    /// Normalized: weights sum to one.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub log_evidence: f64,
    pub log_evidence_uncertainty: f64,
    pub information_gain: f64,
    pub effective_sample_size: f64,
    pub iterations: usize,
    pub posterior: Vec<PosteriorSample>,
}

impl RunResult {
    pub fn from_state<T: TreeSource>(tree: &T, state: &IntegratorState) -> Result<RunResult> {
        if state.dead_points.is_empty() {
            return Err(NestError::InvalidState("no dead points".into()));
        }
        let lz = state.log_evidence;
        let h = information_gain(state);
        let log_w: Vec<f64> = state.dead_points.iter().map(|d| d.log_weight).collect();
        let ess = if lz == f64::NEG_INFINITY {
            0.0
        } else {
            (2.0 * lz - log_sum_exp(log_w.iter().map(|w| 2.0 * w))).exp()
        };
        // Posterior-weighted harmonic mean of the live counts.
        let n_eff = if lz == f64::NEG_INFINITY {
            1.0
        } else {
            let inv: f64 = state
                .dead_points
                .iter()
                .map(|d| (d.log_weight - lz).exp() / d.n_live as f64)
                .sum();
            1.0 / inv
        };
        let posterior = state
            .dead_points
            .iter()
            .filter(|d| d.log_weight > f64::NEG_INFINITY)
            .map(|d| {
                let n = tree.node(d.node);
                PosteriorSample {
                    node: d.node,
                    point_unit: n.point_unit.clone(),
                    point_physical: n.point_physical.clone(),
                    log_likelihood: d.log_likelihood,
                    weight: (d.log_weight - lz).exp(),
                }
            })
            .collect();
        Ok(RunResult {
            log_evidence: lz,
            log_evidence_uncertainty: (h / n_eff).sqrt(),
            information_gain: h,
            effective_sample_size: ess,
            iterations: state.dead_points.len(),
            posterior,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    log_likelihood: f64,
    id: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.log_likelihood
            .total_cmp(&other.log_likelihood)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Frontier sorted by (log-likelihood, id).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    entries: BTreeSet<Entry>,
    /// Frontier nodes that already have at least one child.
    nonleaf: usize,
}

impl Frontier {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (id, logL) in ascending likelihood order.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = (NodeId, f64)> + '_ {
        self.entries.iter().map(|e| (e.id, e.log_likelihood))
    }

    pub fn min(&self) -> Option<(NodeId, f64)> {
        self.entries.first().map(|e| (e.id, e.log_likelihood))
    }

    pub fn max(&self) -> Option<(NodeId, f64)> {
        self.entries.last().map(|e| (e.id, e.log_likelihood))
    }

    pub fn contains(&self, id: NodeId, log_likelihood: f64) -> bool {
        self.entries.contains(&Entry { log_likelihood, id })
    }

    /// Number of entries with log-likelihood strictly below `logl`.
    pub fn count_below(&self, logl: f64) -> usize {
        self.entries
            .range(
                ..Entry {
                    log_likelihood: logl,
                    id: 0,
                },
            )
            .count()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    fn push<T: TreeSource + ?Sized>(&mut self, tree: &T, id: NodeId) -> Result<()> {
        let logl = tree.node(id).log_likelihood;
        if logl.is_nan() {
            return Err(NestError::Data(format!("node {id} has NaN log-likelihood")));
        }
        if !tree.children(id).is_empty() {
            self.nonleaf += 1;
        }
        self.entries.insert(Entry {
            log_likelihood: logl,
            id,
        });
        Ok(())
    }
}

/// Mutable access handed to an agent while a node is being processed.
pub struct ExpansionContext<'a> {
    pub tree: &'a mut ExplorationTree,
    pub frontier: &'a mut Frontier,
    pub state: &'a IntegratorState,
    /// The node that was just removed from the frontier.
    pub node: NodeId,
    /// Live count used for the step that removed `node`.
    pub n_live: usize,
}

impl ExpansionContext<'_> {
    pub fn iteration(&self) -> usize {
        self.state.iteration()
    }

    /// Attach a child and keep frontier bookkeeping consistent.
    pub fn attach_child(
        &mut self,
        parent: NodeId,
        point_unit: Vec<f64>,
        point_physical: Vec<f64>,
        log_likelihood: f64,
    ) -> Result<NodeId> {
        let had_children = self
            .tree
            .get(parent)
            .map(|n| !n.children.is_empty())
            .ok_or(NestError::NotFound(parent))?;
        let plogl = self.tree.node(parent).log_likelihood;
        let id = self
            .tree
            .attach_child(parent, point_unit, point_physical, log_likelihood)?;
        if !had_children && parent != self.node && self.frontier.contains(parent, plogl) {
            self.frontier.nonleaf += 1;
        }
        Ok(id)
    }

    /// Largest likelihood among live points: the frontier plus the current node.
    pub fn log_l_max(&self) -> f64 {
        let cur = self.tree.node(self.node).log_likelihood;
        self.frontier.max().map_or(cur, |(_, l)| l.max(cur))
    }
}

/// Decides where new children are attached during integration.
pub trait NodeExpandingAgent {
    fn expand(&mut self, ctx: &mut ExpansionContext<'_>) -> Result<()>;

    /// True once the agent will never add another child.
    fn exhausted(&self) -> bool;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    estimator: ShrinkageEstimator,
    rng: Option<NsRng>,
    frontier: Frontier,
    state: IntegratorState,
}

impl Integrator {
    pub fn new<T: TreeSource + ?Sized>(tree: &T, estimator: ShrinkageEstimator) -> Result<Self> {
        let mut frontier = Frontier::default();
        for &c in tree.children(ROOT) {
            frontier.push(tree, c)?;
        }
        let rng = match estimator {
            ShrinkageEstimator::Stochastic { seed } => Some(rng_from_seed(seed)),
            _ => None,
        };
        Ok(Integrator {
            estimator,
            rng,
            frontier,
            state: IntegratorState::default(),
        })
    }

    pub fn state(&self) -> &IntegratorState {
        &self.state
    }

    pub fn frontier(&self) -> &Frontier {
        &self.frontier
    }

    pub fn is_done(&self) -> bool {
        self.frontier.is_empty()
    }

    fn pop<T: TreeSource + ?Sized>(
        &mut self,
        tree: &T,
        agent_exhausted: bool,
    ) -> Option<(NodeId, usize)> {
        let e = self.frontier.entries.pop_first()?;
        let n = self.frontier.len() + 1;
        let has_children = !tree.children(e.id).is_empty();
        if has_children {
            self.frontier.nonleaf -= 1;
        }
        let draining = agent_exhausted && !has_children && self.frontier.nonleaf == 0;
        self.account(e, n, draining);
        Some((e.id, n))
    }

    fn account(&mut self, e: Entry, n: usize, draining: bool) {
        let shrink = if draining {
            Shrink::drain(n)
        } else {
            match self.estimator {
                ShrinkageEstimator::Arithmetic => Shrink::arithmetic(n),
                ShrinkageEstimator::Geometric => Shrink::geometric(n),
                ShrinkageEstimator::Stochastic { .. } => {
                    Shrink::stochastic(n, self.rng.as_mut().expect("stochastic rng"))
                }
            }
        };
        let lv = self.state.log_volume_remaining;
        let logl = e.log_likelihood;
        let log_weight = if logl == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            logl + lv + shrink.log_removed
        };
        self.state.accumulate(DeadPoint {
            node: e.id,
            log_likelihood: logl,
            log_volume: lv + shrink.log_remaining,
            log_weight,
            n_live: n,
        });
    }

    fn push_children<T: TreeSource + ?Sized>(&mut self, tree: &T, node: NodeId) -> Result<()> {
        for &c in tree.children(node) {
            self.frontier.push(tree, c)?;
        }
        Ok(())
    }

    /// One step over a fixed tree. Returns the dead point, or None when done.
    pub fn step<T: TreeSource + ?Sized>(&mut self, tree: &T) -> Result<Option<DeadPoint>> {
        let Some((node, _)) = self.pop(tree, true) else {
            return Ok(None);
        };
        self.push_children(tree, node)?;
        Ok(self.state.dead_points.last().copied())
    }

    /// One step in which `agent` may grow the tree.
    pub fn step_with_agent(
        &mut self,
        tree: &mut ExplorationTree,
        agent: &mut dyn NodeExpandingAgent,
    ) -> Result<Option<DeadPoint>> {
        // If the agent stops on this node, the node joins the final equal
        // split, as an offline integration of the finished tree would do.
        let saved = (!agent.exhausted()).then(|| {
            (
                self.state.log_volume_remaining,
                self.state.log_evidence,
                self.state.information,
                self.rng.clone(),
            )
        });
        let Some((node, n_live)) = self.pop(&*tree, agent.exhausted()) else {
            return Ok(None);
        };
        let mut ctx = ExpansionContext {
            tree,
            frontier: &mut self.frontier,
            state: &self.state,
            node,
            n_live,
        };
        agent.expand(&mut ctx)?;
        if let Some((lv, lz, h, rng)) = saved {
            if agent.exhausted() && tree.children(node).is_empty() && self.frontier.nonleaf == 0 {
                let dp = self
                    .state
                    .dead_points
                    .pop()
                    .expect("node was just accounted");
                self.state.log_volume_remaining = lv;
                self.state.log_evidence = lz;
                self.state.information = h;
                self.rng = rng;
                let e = Entry {
                    log_likelihood: dp.log_likelihood,
                    id: node,
                };
                self.account(e, n_live, true);
            }
        }
        self.push_children(&*tree, node)?;
        Ok(self.state.dead_points.last().copied())
    }

    pub fn run<T: TreeSource + ?Sized>(mut self, tree: &T) -> Result<IntegratorState> {
        while self.step(tree)?.is_some() {}
        Ok(self.state)
    }

    pub fn into_state(self) -> IntegratorState {
        self.state
    }
}

/// Integrate a finished tree (or view).
pub fn integrate<T: TreeSource>(tree: &T, estimator: ShrinkageEstimator) -> Result<RunResult> {
    if tree.children(ROOT).is_empty() {
        return Err(NestError::invalid("tree has no root children to integrate"));
    }
    let state = Integrator::new(tree, estimator)?.run(tree)?;
    RunResult::from_state(tree, &state)
}

/// Integrate while an agent grows the tree.
pub fn integrate_with_agent(
    tree: &mut ExplorationTree,
    estimator: ShrinkageEstimator,
    agent: &mut dyn NodeExpandingAgent,
) -> Result<(IntegratorState, RunResult)> {
    let mut integ = Integrator::new(&*tree, estimator)?;
    while integ.step_with_agent(tree, agent)?.is_some() {}
    let state = integ.into_state();
    let result = RunResult::from_state(&*tree, &state)?;
    Ok((state, result))
}

/// Number of folds used when the caller does not choose.
pub fn default_folds(tree: &ExplorationTree) -> usize {
    tree.root().children.len().min(10)
}

pub const DEFAULT_BETA_RESAMPLES: usize = 30;

/// Spread of log Z across K fold views times B stochastic-shrinkage
/// integrations each, scaled to the full run (divided by sqrt(K)).
pub fn estimate_uncertainty(
    tree: &ExplorationTree,
    folds: usize,
    resamples: usize,
    seed: u64,
    reattach: Reattach,
) -> Result<f64> {
    let rc = tree.root().children.len();
    if folds < 2 {
        return Err(NestError::invalid("need at least 2 folds"));
    }
    if resamples < 1 {
        return Err(NestError::invalid("need at least 1 resample"));
    }
    if rc < folds {
        return Err(NestError::invalid(format!(
            "tree has {rc} root children, fewer than {folds} folds"
        )));
    }
    let views = (0..folds)
        .map(|k| {
            let keep: BTreeSet<usize> = (k..rc).step_by(folds).collect();
            tree.unlink_root_children(&keep, reattach)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..folds)
        .flat_map(|k| (0..resamples).map(move |b| (k, b)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(k, b)| {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((k * resamples + b) as u64);
            let view = &views[k];
            let st =
                Integrator::new(view, ShrinkageEstimator::Stochastic { seed: s })?.run(view)?;
            Ok(st.log_evidence)
        })
        .collect::<Result<Vec<f64>>>()?;
    let finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return Ok(0.0);
    }
    let m = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (finite.len() - 1) as f64;
    Ok((var / folds as f64).sqrt())
}

/// Draw `count` posterior points with replacement, proportional to weight.
pub fn resample_equal_weight<R: Rng + ?Sized>(
    result: &RunResult,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if result.posterior.is_empty() {
        return Err(NestError::invalid("empty posterior"));
    }
    let mut cdf = Vec::with_capacity(result.posterior.len());
    let mut acc = 0.0;
    for s in &result.posterior {
        acc += s.weight;
        cdf.push(acc);
    }
    Ok((0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            result.posterior[i].point_physical.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_tree(n: usize, logl: impl Fn(usize) -> f64) -> ExplorationTree {
        let mut t = ExplorationTree::new(1).unwrap();
        for i in 0..n {
            t.attach_child(ROOT, vec![0.5], vec![0.5], logl(i)).unwrap();
        }
        t
    }

    #[test]
    fn shrink_fraction_values() {
        let mut rng = rng_from_seed(1);
        let a = shrink_fraction(ShrinkageEstimator::Arithmetic, 400, &mut rng).unwrap();
        assert!((a - 0.0024938).abs() < 1e-7);
        let g = shrink_fraction(ShrinkageEstimator::Geometric, 1, &mut rng).unwrap();
        assert!((g - 0.63212).abs() < 1e-5);
        assert!(shrink_fraction(ShrinkageEstimator::Arithmetic, 0, &mut rng).is_err());
    }

    #[test]
    fn single_child_gets_full_volume() {
        let t = flat_tree(1, |_| 0.0);
        let r = integrate(&t, ShrinkageEstimator::Arithmetic).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.log_evidence.abs() < 1e-15);
        assert_eq!(r.information_gain, 0.0);
    }

    #[test]
    fn constant_likelihood_drains_to_full_volume() {
        let t = flat_tree(100, |_| 0.0);
        let r = integrate(&t, ShrinkageEstimator::Arithmetic).unwrap();
        assert!(r.log_evidence.abs() < 1e-10);
        assert!((r.effective_sample_size - 100.0).abs() < 1e-6);
    }

    #[test]
    fn empty_tree_is_rejected() {
        let t = ExplorationTree::new(2).unwrap();
        assert!(integrate(&t, ShrinkageEstimator::Arithmetic).is_err());
    }

    #[test]
    fn geometric_volume_bookkeeping() {
        // A chain per root child keeps the frontier at constant N.
        let n = 10;
        let mut t = ExplorationTree::new(1).unwrap();
        let mut tips: Vec<NodeId> = (0..n)
            .map(|i| {
                t.attach_child(ROOT, vec![0.5], vec![0.5], i as f64 * 0.01)
                    .unwrap()
            })
            .collect();
        for depth in 1..20 {
            for (i, tip) in tips.iter_mut().enumerate() {
                let l = depth as f64 + i as f64 * 0.01;
                *tip = t.attach_child(*tip, vec![0.5], vec![0.5], l).unwrap();
            }
        }
        let mut integ = Integrator::new(&t, ShrinkageEstimator::Geometric).unwrap();
        for i in 1..=50 {
            let dp = integ.step(&t).unwrap().unwrap();
            assert_eq!(dp.n_live, n);
            assert!((dp.log_volume + i as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_degenerate_and_binomial() {
        let t = flat_tree(1, |_| 0.0);
        let r = integrate(&t, ShrinkageEstimator::Arithmetic).unwrap();
        let mut rng = rng_from_seed(3);
        let pts = resample_equal_weight(&r, 5, &mut rng).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p == &vec![0.5]));
    }
}
