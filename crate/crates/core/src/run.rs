//! Run driver: executes an agent on a problem, streams the dead-point log and
//! the tree to an output directory, checkpoints, resumes, merges runs and
//! reads dead-point logs back for offline diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::agents::{
    dynamic_round, min_live_floor, posterior_weight_expand, pre_drain_history, run_classic,
    ClassicAgent, ClassicAgentState, DynamicPolicy,
};
use crate::diagnostics::{
    run_segment_monitor, InsertionRecord, UTestAccumulator, DEFAULT_WINDOW, SEGMENT_THRESHOLD,
};
use crate::error::{NestError, Result};
use crate::integrator::{
    estimate_uncertainty, integrate, resample_equal_weight, Integrator, IntegratorState, RunResult,
    ShrinkageEstimator, DEFAULT_BETA_RESAMPLES,
};
use crate::lrps::{Lrps, OracleSampler, PriorRejection, Sampler};
use crate::problems::{builtin, ExternalProblem, ProblemParams, SharedProblem};
use crate::step::{AutoTune, StepKind, StepSamplerConfig};
use crate::termination::TerminationPolicy;
use crate::tree::{write_header, ExplorationTree, Reattach};
use crate::{rng_from_seed, NsRng};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const DEAD_LOG_TAG: &str = "#nestkit-deadlog";
pub const POSTERIOR_TAG: &str = "#nestkit-posterior";
pub const UTEST_TAG: &str = "#nestkit-utest";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TREE_FILE: &str = "tree.nstree";
pub const DEAD_FILE: &str = "dead.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cbor";
pub const RESULTS_FILE: &str = "results.txt";
pub const POSTERIOR_FILE: &str = "posterior.tsv";
pub const EQUAL_WEIGHT_FILE: &str = "equal_weight.tsv";
pub const UTEST_FILE: &str = "utest.tsv";

/// Seed offset for the pilot run that sizes a live-point floor.
const PILOT_SEED_XOR: u64 = 0x5049_4C4F_5452_554E;
const PILOT_LIVE: usize = 50;
const MAX_LIVE: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Classic,
    Dynamic,
    PosteriorWeight,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Classic => "classic",
            AgentKind::Dynamic => "dynamic",
            AgentKind::PosteriorWeight => "posterior-weight",
        }
    }
}

impl FromStr for AgentKind {
    type Err = NestError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(AgentKind::Classic),
            "dynamic" => Ok(AgentKind::Dynamic),
            "posterior-weight" => Ok(AgentKind::PosteriorWeight),
            _ => Err(NestError::invalid(format!("unknown agent '{s}'"))),
        }
    }
}

pub const SAMPLER_KINDS: &[&str] = &[
    "prior",
    "oracle",
    "ellipsoid",
    "mlfriends",
    "gauss-walk",
    "slice",
    "harm-sphere",
    "harm",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: String,
    pub steps: usize,
    pub adapt: bool,
    pub region_filter: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: "mlfriends".into(),
            steps: 16,
            adapt: false,
            region_filter: false,
        }
    }
}

impl SamplerSpec {
    pub fn build(&self) -> Result<Sampler> {
        let step_kind = match self.kind.as_str() {
            "prior" => return Ok(Sampler::Prior(PriorRejection::default())),
            "oracle" => return Ok(Sampler::Oracle(OracleSampler::default())),
            "ellipsoid" => return Ok(Sampler::ellipsoid()),
            "mlfriends" => return Ok(Sampler::mlfriends()),
            "gauss-walk" | "gauss" => StepKind::GaussWalk,
            "slice" | "slice-axis" => StepKind::SliceAxis,
            "harm-sphere" => StepKind::HarmSphere,
            "harm" => StepKind::Harm,
            other => {
                return Err(NestError::invalid(format!(
                    "unknown sampler '{other}' (expected one of {})",
                    SAMPLER_KINDS.join(", ")
                )))
            }
        };
        let mut cfg = StepSamplerConfig::new(step_kind, self.steps);
        cfg.region_filter = self.region_filter;
        if self.adapt {
            cfg.auto_tune = AutoTune::MoveDistance;
        }
        Sampler::step(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub params: ProblemParams,
    /// Config file of a user problem; `name` is then ignored.
    pub config: Option<PathBuf>,
}

impl ProblemSpec {
    pub fn builtin(name: &str) -> Self {
        ProblemSpec {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn load(&self) -> Result<SharedProblem> {
        match &self.config {
            Some(path) => Ok(std::sync::Arc::new(ExternalProblem::from_config_file(
                path,
            )?)),
            None => builtin(&self.name, &self.params),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub sampler: SamplerSpec,
    pub agent: AgentKind,
    pub n_live: usize,
    pub n_live_min: Option<usize>,
    pub target_ess: Option<f64>,
    pub target_log_z_err: Option<f64>,
    pub policy: TerminationPolicy,
    pub estimator: ShrinkageEstimator,
    pub seed: u64,
    /// Folds for the bootstrap uncertainty; default min(root children, 10).
    pub folds: Option<usize>,
    pub resamples: usize,
    pub jobs: usize,
    pub checkpoint_every: usize,
    pub equal_weight_samples: usize,
    /// New threads per dynamic round, expansions per posterior-weight round.
    pub batch: Option<usize>,
    pub max_rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemSpec::builtin("gaussian"),
            sampler: SamplerSpec::default(),
            agent: AgentKind::Classic,
            n_live: 400,
            n_live_min: None,
            target_ess: None,
            target_log_z_err: None,
            policy: TerminationPolicy::default(),
            estimator: ShrinkageEstimator::Arithmetic,
            seed: 1,
            folds: None,
            resamples: DEFAULT_BETA_RESAMPLES,
            jobs: 1,
            checkpoint_every: 1000,
            equal_weight_samples: 1000,
            batch: None,
            max_rounds: 20,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_live == 0 {
            return Err(NestError::invalid("--nlive must be positive"));
        }
        if self.jobs == 0 {
            return Err(NestError::invalid("--jobs must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(NestError::invalid("checkpoint interval must be positive"));
        }
        self.policy.validate()?;
        self.sampler.build()?;
        Ok(())
    }

    fn ess_target(&self) -> Option<f64> {
        match (self.target_ess, self.target_log_z_err) {
            (None, None) => Some(DynamicPolicy::default().target_ess.unwrap_or(400.0)),
            (t, _) => t,
        }
    }

    fn targets_met(&self, r: &RunResult) -> bool {
        self.ess_target()
            .is_none_or(|t| r.effective_sample_size >= t)
            && self
                .target_log_z_err
                .is_none_or(|t| r.log_evidence_uncertainty <= t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub problem_name: String,
    pub dimension: usize,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != RUN_FORMAT_VERSION {
            return Err(NestError::Data(format!(
                "unsupported run format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Base,
    Refine,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub rng: NsRng,
    pub sampler: Sampler,
    pub rounds: usize,
    pub evals: u64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub phase: Phase,
    pub tree_len: usize,
    pub tree_bytes: u64,
    pub dead_bytes: u64,
    pub integrator: Integrator,
    pub base_state: Option<IntegratorState>,
    pub agent: ClassicAgentState,
    pub refine: Option<RefineState>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let f = BufReader::new(File::open(path)?);
        let c: Checkpoint =
            ciborium::from_reader(f).map_err(|e| NestError::Serde(e.to_string()))?;
        if c.format_version != RUN_FORMAT_VERSION {
            return Err(NestError::Data(format!(
                "unsupported checkpoint version {}",
                c.format_version
            )));
        }
        Ok(c)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("cbor.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            ciborium::into_writer(self, &mut w).map_err(|e| NestError::Serde(e.to_string()))?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Appends text and counts the bytes written.
struct CountingFile {
    w: BufWriter<File>,
    bytes: u64,
}

impl CountingFile {
    fn create(path: &Path) -> Result<Self> {
        Ok(CountingFile {
            w: BufWriter::new(File::create(path)?),
            bytes: 0,
        })
    }

    /// Reopen for appending after cutting the file at `bytes`.
    fn reopen(path: &Path, bytes: u64) -> Result<Self> {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(bytes)?;
        drop(f);
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(CountingFile {
            w: BufWriter::new(f),
            bytes,
        })
    }

    fn write_bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b)?;
        self.bytes += b.len() as u64;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn dead_log_header() -> String {
    format!(
        "{DEAD_LOG_TAG}\t{RUN_FORMAT_VERSION}\niteration\tnode\tlogl\tlogv\tlogw\tnlive\tinsert_order\tinsert_nlive\n"
    )
}

fn join_or_dash(v: impl Iterator<Item = usize>) -> String {
    let s: Vec<String> = v.map(|x| x.to_string()).collect();
    if s.is_empty() {
        "-".into()
    } else {
        s.join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Complete(Box<RunSummary>),
    Interrupted { iteration: usize },
}

/// Results summary, written as `key=value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub dimension: usize,
    pub sampler: String,
    pub agent: String,
    pub seed: u64,
    pub n_live: usize,
    pub floor: Option<usize>,
    pub log_z: f64,
    /// Bootstrap spread over folds and stochastic shrinkage.
    pub log_z_err: f64,
    /// sqrt(H / N) with N the posterior-weighted harmonic live count.
    pub log_z_err_classic: f64,
    pub analytic_log_z: Option<f64>,
    pub information_gain: f64,
    pub ess: f64,
    pub iterations: usize,
    pub nodes: usize,
    pub likelihood_evals: u64,
    pub stop_reason: String,
    pub rounds: usize,
    pub utest_z: f64,
    pub utest_z_rolling: f64,
    pub segments: usize,
    pub segment_flagged: bool,
    pub plateau_events: usize,
    pub plateau_tied_points: usize,
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

impl RunSummary {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={RUN_FORMAT_VERSION}");
        let _ = writeln!(s, "problem={}", self.problem);
        let _ = writeln!(s, "dimension={}", self.dimension);
        let _ = writeln!(s, "sampler={}", self.sampler);
        let _ = writeln!(s, "agent={}", self.agent);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_live={}", self.n_live);
        let _ = writeln!(s, "floor={}", fmt_opt(&self.floor));
        let _ = writeln!(s, "log_z={}", self.log_z);
        let _ = writeln!(s, "log_z_err={}", self.log_z_err);
        let _ = writeln!(s, "log_z_err_classic={}", self.log_z_err_classic);
        let _ = writeln!(s, "analytic_log_z={}", fmt_opt(&self.analytic_log_z));
        let _ = writeln!(s, "information_gain={}", self.information_gain);
        let _ = writeln!(s, "ess={}", self.ess);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "nodes={}", self.nodes);
        let _ = writeln!(s, "likelihood_evals={}", self.likelihood_evals);
        let _ = writeln!(s, "stop_reason={}", self.stop_reason);
        let _ = writeln!(s, "rounds={}", self.rounds);
        let _ = writeln!(s, "utest_z={}", self.utest_z);
        let _ = writeln!(s, "utest_z_rolling={}", self.utest_z_rolling);
        let _ = writeln!(s, "segments={}", self.segments);
        let _ = writeln!(s, "segment_flagged={}", self.segment_flagged);
        let _ = writeln!(s, "plateau_events={}", self.plateau_events);
        let _ = writeln!(s, "plateau_tied_points={}", self.plateau_tied_points);
        s
    }
}

/// Parse a `key=value` file, rejecting unknown format versions.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| NestError::Parse {
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    match map.get("format_version").map(|v| v.parse::<u32>()) {
        Some(Ok(v)) if v == RUN_FORMAT_VERSION => Ok(map),
        Some(_) => Err(NestError::Data("unsupported results format version".into())),
        None => Err(NestError::Data("missing format_version".into())),
    }
}

/// An in-progress run bound to an output directory.
pub struct Session {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub problem: SharedProblem,
    pub tree: ExplorationTree,
    checkpoint: Checkpoint,
    tree_out: CountingFile,
    dead_out: CountingFile,
    insert_cursor: usize,
}

impl Session {
    /// Start a fresh run, creating (or overwriting) the output files in `dir`.
    pub fn start(config: RunConfig, dir: &Path) -> Result<Session> {
        config.validate()?;
        let problem = config.problem.load()?;
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: RUN_FORMAT_VERSION,
            config: config.clone(),
            problem_name: problem.name().to_string(),
            dimension: problem.dimension(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;

        let floor = match (config.n_live_min, config.agent, config.target_log_z_err) {
            (Some(f), _, _) => Some(f),
            (None, AgentKind::Classic, Some(sigma)) => Some(plan_floor(&config, &problem, sigma)?),
            _ => None,
        };
        let mut tree = ExplorationTree::new(problem.dimension())?;
        let mut agent = ClassicAgent::new(
            &*problem,
            config.n_live,
            config.policy,
            config.sampler.build()?,
            config.seed,
        )?;
        if let Some(f) = floor {
            agent = agent.with_floor(f);
        }
        agent.seed_root(&mut tree)?;
        let agent_state = agent.state;

        let mut tree_out = CountingFile::create(&dir.join(TREE_FILE))?;
        let mut buf = Vec::new();
        write_header(&mut buf, tree.dimension())?;
        tree.write_nodes(&mut buf, 0)?;
        tree_out.write_bytes(&buf)?;
        let mut dead_out = CountingFile::create(&dir.join(DEAD_FILE))?;
        dead_out.write_bytes(dead_log_header().as_bytes())?;

        let integrator = Integrator::new(&tree, config.estimator)?;
        let checkpoint = Checkpoint {
            format_version: RUN_FORMAT_VERSION,
            phase: Phase::Base,
            tree_len: tree.len(),
            tree_bytes: tree_out.bytes,
            dead_bytes: dead_out.bytes,
            integrator,
            base_state: None,
            agent: agent_state,
            refine: None,
        };
        let mut s = Session {
            dir: dir.to_path_buf(),
            config,
            problem,
            tree,
            checkpoint,
            tree_out,
            dead_out,
            insert_cursor: 0,
        };
        s.save_checkpoint()?;
        Ok(s)
    }

    /// Reopen a run from its directory, or from the tree file inside it.
    pub fn resume(path: &Path) -> Result<Session> {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest = Manifest::read(&dir)?;
        let config = manifest.config;
        let problem = config.problem.load()?;
        let checkpoint = Checkpoint::read(&dir.join(CHECKPOINT_FILE))?;
        let tree_path = dir.join(TREE_FILE);
        let tree_out = CountingFile::reopen(&tree_path, checkpoint.tree_bytes)?;
        let tree = ExplorationTree::read_from(BufReader::new(File::open(&tree_path)?))?;
        if tree.len() != checkpoint.tree_len {
            return Err(NestError::Data(format!(
                "tree has {} nodes, checkpoint expects {}",
                tree.len(),
                checkpoint.tree_len
            )));
        }
        let dead_out = CountingFile::reopen(&dir.join(DEAD_FILE), checkpoint.dead_bytes)?;
        let insert_cursor = checkpoint.agent.insertions.len();
        Ok(Session {
            dir,
            config,
            problem,
            tree,
            checkpoint,
            tree_out,
            dead_out,
            insert_cursor,
        })
    }

    pub fn phase(&self) -> Phase {
        self.checkpoint.phase
    }

    pub fn iteration(&self) -> usize {
        self.checkpoint.integrator.state().iteration()
    }

    fn flush_tree(&mut self) -> Result<()> {
        if self.tree.len() > self.checkpoint.tree_len {
            let mut buf = Vec::new();
            self.tree.write_nodes(&mut buf, self.checkpoint.tree_len)?;
            self.tree_out.write_bytes(&buf)?;
            self.checkpoint.tree_len = self.tree.len();
        }
        Ok(())
    }

    fn save_checkpoint(&mut self) -> Result<()> {
        self.flush_tree()?;
        self.tree_out.flush()?;
        self.dead_out.flush()?;
        self.checkpoint.tree_bytes = self.tree_out.bytes;
        self.checkpoint.dead_bytes = self.dead_out.bytes;
        self.checkpoint.write(&self.dir.join(CHECKPOINT_FILE))
    }

    /// Continue until completion, an interrupt request, or (for testing)
    /// `stop_after` total iterations.
    pub fn run(&mut self, interrupt: &AtomicBool, stop_after: Option<usize>) -> Result<Outcome> {
        if self.checkpoint.phase == Phase::Base {
            let problem = self.problem.clone();
            let mut agent = ClassicAgent::restore(&*problem, self.checkpoint.agent.clone());
            let mut since = 0usize;
            let result = loop {
                let it = self.checkpoint.integrator.state().iteration();
                if interrupt.load(Ordering::SeqCst) || stop_after.is_some_and(|n| it >= n) {
                    break Ok(Some(it));
                }
                let step = self
                    .checkpoint
                    .integrator
                    .step_with_agent(&mut self.tree, &mut agent);
                let dp = match step {
                    Ok(Some(dp)) => dp,
                    Ok(None) => break Ok(None),
                    Err(e) => break Err(e),
                };
                let it = self.checkpoint.integrator.state().iteration();
                let events = &agent.state.insertions[self.insert_cursor..];
                let line = format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    it,
                    dp.node,
                    dp.log_likelihood,
                    dp.log_volume,
                    dp.log_weight,
                    dp.n_live,
                    join_or_dash(events.iter().map(|e| e.order)),
                    join_or_dash(events.iter().map(|e| e.live_count)),
                );
                self.insert_cursor = agent.state.insertions.len();
                self.dead_out.write_bytes(line.as_bytes())?;
                self.flush_tree()?;
                since += 1;
                if since >= self.config.checkpoint_every {
                    since = 0;
                    self.checkpoint.agent = agent.state.clone();
                    self.save_checkpoint()?;
                }
            };
            self.checkpoint.agent = agent.state;
            match result {
                Ok(Some(it)) => {
                    self.save_checkpoint()?;
                    return Ok(Outcome::Interrupted { iteration: it });
                }
                Ok(None) => {}
                Err(e) => {
                    // Keep what was computed so far inspectable.
                    let _ = self.flush_tree().and_then(|_| self.tree_out.flush());
                    let _ = self.dead_out.flush();
                    return Err(e);
                }
            }
            self.checkpoint.base_state = Some(self.checkpoint.integrator.state().clone());
            self.checkpoint.phase = match self.config.agent {
                AgentKind::Classic => Phase::Done,
                _ => Phase::Refine,
            };
            if self.checkpoint.phase == Phase::Refine {
                self.checkpoint.refine = Some(RefineState {
                    rng: rng_from_seed(self.config.seed ^ 0xD1B5_4A32_D192_ED03),
                    sampler: self.config.sampler.build()?,
                    rounds: 0,
                    evals: 0,
                });
            }
            self.save_checkpoint()?;
        }
        if self.checkpoint.phase == Phase::Refine {
            loop {
                if interrupt.load(Ordering::SeqCst) {
                    self.save_checkpoint()?;
                    return Ok(Outcome::Interrupted {
                        iteration: self.iteration(),
                    });
                }
                let refine = self.checkpoint.refine.as_mut().expect("refine state");
                let current = integrate(&self.tree, ShrinkageEstimator::Arithmetic)?;
                if refine.rounds >= self.config.max_rounds || self.config.targets_met(&current) {
                    break;
                }
                let batch = self.config.batch.unwrap_or(self.config.n_live);
                let before = refine.sampler.stats().evals;
                match self.config.agent {
                    AgentKind::Dynamic => {
                        let policy = DynamicPolicy {
                            n_new: batch,
                            ..Default::default()
                        };
                        dynamic_round(
                            &mut self.tree,
                            &*self.problem,
                            &mut refine.sampler,
                            &policy,
                            &mut refine.rng,
                        )?;
                    }
                    AgentKind::PosteriorWeight => {
                        posterior_weight_expand(
                            &mut self.tree,
                            &*self.problem,
                            &mut refine.sampler,
                            batch,
                            &mut refine.rng,
                        )?;
                    }
                    AgentKind::Classic => unreachable!("classic runs have no refine phase"),
                }
                refine.evals += refine.sampler.stats().evals - before;
                refine.rounds += 1;
                self.save_checkpoint()?;
            }
            self.checkpoint.phase = Phase::Done;
            self.save_checkpoint()?;
        }
        let summary = self.finish()?;
        Ok(Outcome::Complete(Box::new(summary)))
    }

    /// Integrate the final tree and write result files.
    fn finish(&mut self) -> Result<RunSummary> {
        let base = self
            .checkpoint
            .base_state
            .clone()
            .ok_or_else(|| NestError::InvalidState("base run incomplete".into()))?;
        let (state, refined) = match self.config.agent {
            AgentKind::Classic => (base.clone(), false),
            _ => (
                Integrator::new(&self.tree, ShrinkageEstimator::Arithmetic)?.run(&self.tree)?,
                true,
            ),
        };
        if refined {
            // The dead-point log describes the final tree.
            let mut out = CountingFile::create(&self.dir.join(DEAD_FILE))?;
            out.write_bytes(dead_log_header().as_bytes())?;
            for (i, dp) in state.dead_points.iter().enumerate() {
                let line = format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t-\t-\n",
                    i + 1,
                    dp.node,
                    dp.log_likelihood,
                    dp.log_volume,
                    dp.log_weight,
                    dp.n_live
                );
                out.write_bytes(line.as_bytes())?;
            }
            out.flush()?;
        }
        let result = RunResult::from_state(&self.tree, &state)?;
        let log_z_err = self
            .bootstrap_uncertainty()
            .unwrap_or(result.log_evidence_uncertainty);

        let agent = &self.checkpoint.agent;
        let records: Vec<InsertionRecord> = agent
            .insertions
            .iter()
            .map(|e| InsertionRecord::new(e.order, e.live_count))
            .collect::<Result<_>>()?;
        let segments = run_segment_monitor(SEGMENT_THRESHOLD, records.iter().copied())?;
        write_utest_trace(&self.dir.join(UTEST_FILE), &records, agent)?;
        self.write_posterior(&result)?;

        let refine_evals = self.checkpoint.refine.as_ref().map_or(0, |r| r.evals);
        let summary = RunSummary {
            problem: self.problem.name().to_string(),
            dimension: self.problem.dimension(),
            sampler: agent.sampler.name(),
            agent: self.config.agent.as_str().into(),
            seed: self.config.seed,
            n_live: self.config.n_live,
            floor: agent.floor,
            log_z: result.log_evidence,
            log_z_err,
            log_z_err_classic: result.log_evidence_uncertainty,
            analytic_log_z: self.problem.analytic_log_z(),
            information_gain: result.information_gain,
            ess: result.effective_sample_size,
            iterations: result.iterations,
            nodes: self.tree.len(),
            likelihood_evals: agent.evals + refine_evals,
            stop_reason: agent
                .stop_reason
                .map_or("frontier-empty".into(), |r| r.as_str().into()),
            rounds: self.checkpoint.refine.as_ref().map_or(0, |r| r.rounds),
            utest_z: agent.utest.z_score().unwrap_or(0.0),
            utest_z_rolling: agent.utest_rolling.z_score().unwrap_or(0.0),
            segments: segments.lengths.len(),
            segment_flagged: segments.flagged,
            plateau_events: agent.plateau.events,
            plateau_tied_points: agent.plateau.tied_points,
        };
        fs::write(self.dir.join(RESULTS_FILE), summary.to_kv())?;
        Ok(summary)
    }

    fn bootstrap_uncertainty(&self) -> Option<f64> {
        let rc = self.tree.root().children.len();
        let folds = self.config.folds.unwrap_or(rc.min(10));
        if folds < 2 || rc < folds {
            return None;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .ok()?;
        pool.install(|| {
            estimate_uncertainty(
                &self.tree,
                folds,
                self.config.resamples,
                self.config.seed,
                Reattach::None,
            )
        })
        .ok()
        .filter(|v| v.is_finite())
    }

    fn write_posterior(&self, result: &RunResult) -> Result<()> {
        let labels = self.problem.labels();
        let mut s = format!("{POSTERIOR_TAG}\t{RUN_FORMAT_VERSION}\nweight\tlogl");
        for l in &labels {
            let _ = write!(s, "\t{l}");
        }
        s.push('\n');
        for p in &result.posterior {
            let _ = write!(s, "{}\t{}", p.weight, p.log_likelihood);
            for x in &p.point_physical {
                let _ = write!(s, "\t{x}");
            }
            s.push('\n');
        }
        fs::write(self.dir.join(POSTERIOR_FILE), s)?;

        let mut rng = rng_from_seed(self.config.seed ^ 0x4551_5541_4C57_4754);
        let pts = resample_equal_weight(result, self.config.equal_weight_samples, &mut rng)?;
        let mut s = format!(
            "{POSTERIOR_TAG}\t{RUN_FORMAT_VERSION}\n{}\n",
            labels.join("\t")
        );
        for p in pts {
            let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        fs::write(self.dir.join(EQUAL_WEIGHT_FILE), s)?;
        Ok(())
    }
}

fn write_utest_trace(
    path: &Path,
    records: &[InsertionRecord],
    agent: &ClassicAgentState,
) -> Result<()> {
    let mut s = format!("{UTEST_TAG}\t{RUN_FORMAT_VERSION}\ninsertion\titeration\tz\tz_rolling\n");
    let stride = (records.len() / 1000).max(1);
    let mut full = UTestAccumulator::new();
    let mut rolling = UTestAccumulator::with_window(DEFAULT_WINDOW)?;
    for (i, (r, e)) in records.iter().zip(&agent.insertions).enumerate() {
        full.push(*r);
        rolling.push(*r);
        if (i + 1) % stride == 0 || i + 1 == records.len() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                i + 1,
                e.iteration,
                full.z_score()?,
                rolling.z_score()?
            );
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Size a live-point floor for `sigma` from a short pilot run.
fn plan_floor(config: &RunConfig, problem: &SharedProblem, sigma: f64) -> Result<usize> {
    let pilot = run_classic(
        &**problem,
        PILOT_LIVE.min(config.n_live).max(1),
        config.policy,
        config.sampler.build()?,
        ShrinkageEstimator::Arithmetic,
        config.seed ^ PILOT_SEED_XOR,
    )?;
    let hist = pre_drain_history(&pilot.state, pilot.agent.exhausted_at);
    let plan = min_live_floor(&hist, sigma, MAX_LIVE)?;
    if !plan.reachable {
        eprintln!(
            "warning: target log Z uncertainty {sigma} needs more than {MAX_LIVE} live points; capped"
        );
    }
    Ok(plan.floor)
}

/// Start and run to completion (convenience for library users and tests).
pub fn run_to_completion(config: RunConfig, dir: &Path) -> Result<RunSummary> {
    let mut s = Session::start(config, dir)?;
    match s.run(&AtomicBool::new(false), None)? {
        Outcome::Complete(summary) => Ok(*summary),
        Outcome::Interrupted { .. } => Err(NestError::InvalidState("run interrupted".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub runs: usize,
    pub log_z: f64,
    pub log_z_err: f64,
    pub ess: f64,
    pub iterations: usize,
    pub run_log_z: Vec<f64>,
    pub run_log_z_err: Vec<f64>,
    /// Standard deviation of the individual log Z values.
    pub spread: f64,
    pub warnings: Vec<String>,
}

impl MergeReport {
    pub fn to_kv(&self) -> String {
        let mut s = format!("format_version={RUN_FORMAT_VERSION}\n");
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "log_z={}", self.log_z);
        let _ = writeln!(s, "log_z_err={}", self.log_z_err);
        let _ = writeln!(s, "ess={}", self.ess);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "spread={}", self.spread);
        for (i, (z, e)) in self.run_log_z.iter().zip(&self.run_log_z_err).enumerate() {
            let _ = writeln!(s, "run{i}_log_z={z}");
            let _ = writeln!(s, "run{i}_log_z_err={e}");
        }
        s
    }
}

pub const MERGE_WARN_SIGMA: f64 = 5.0;

/// Merge trees and report the combined evidence plus the between-run spread.
pub fn merge_trees_report(trees: &[ExplorationTree]) -> Result<(ExplorationTree, MergeReport)> {
    let merged = ExplorationTree::merge(trees)?;
    let mut zs = Vec::new();
    let mut errs = Vec::new();
    for t in trees {
        let r = integrate(t, ShrinkageEstimator::Arithmetic)?;
        zs.push(r.log_evidence);
        errs.push(r.log_evidence_uncertainty);
    }
    let mut warnings = Vec::new();
    for i in 0..zs.len() {
        for j in (i + 1)..zs.len() {
            let s = (errs[i].powi(2) + errs[j].powi(2)).sqrt();
            let d = (zs[i] - zs[j]).abs();
            if d > MERGE_WARN_SIGMA * s {
                warnings.push(format!(
                    "runs {i} and {j} disagree: log Z {} vs {} ({:.1} sigma)",
                    zs[i],
                    zs[j],
                    d / s
                ));
            }
        }
    }
    let m = zs.iter().sum::<f64>() / zs.len() as f64;
    let spread = if zs.len() > 1 {
        (zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (zs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let r = integrate(&merged, ShrinkageEstimator::Arithmetic)?;
    let report = MergeReport {
        runs: trees.len(),
        log_z: r.log_evidence,
        log_z_err: r.log_evidence_uncertainty,
        ess: r.effective_sample_size,
        iterations: r.iterations,
        run_log_z: zs,
        run_log_z_err: errs,
        spread,
        warnings,
    };
    Ok((merged, report))
}

/// Merge completed run directories into `out`.
pub fn merge_runs(dirs: &[PathBuf], out: &Path) -> Result<MergeReport> {
    if dirs.is_empty() {
        return Err(NestError::invalid("nothing to merge"));
    }
    let mut trees = Vec::new();
    let mut first: Option<Manifest> = None;
    for d in dirs {
        let m = Manifest::read(d)?;
        if let Some(f) = &first {
            if f.config.problem != m.config.problem
                || f.problem_name != m.problem_name
                || f.dimension != m.dimension
            {
                return Err(NestError::invalid(format!(
                    "run {} solves a different problem than {}",
                    d.display(),
                    dirs[0].display()
                )));
            }
        } else {
            first = Some(m);
        }
        let f = BufReader::new(File::open(d.join(TREE_FILE))?);
        trees.push(ExplorationTree::read_from(f)?);
    }
    let (merged, report) = merge_trees_report(&trees)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(TREE_FILE), merged.to_bytes())?;
    fs::write(out.join(RESULTS_FILE), report.to_kv())?;
    Ok(report)
}

/// One parsed dead-point log row.
#[derive(Clone, Debug, PartialEq)]
pub struct DeadRow {
    pub iteration: usize,
    pub node: usize,
    pub log_likelihood: f64,
    pub log_volume: f64,
    pub log_weight: f64,
    pub n_live: usize,
    pub insertions: Vec<InsertionRecord>,
}

fn parse_list(s: &str, line: usize) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse().map_err(|_| NestError::Parse {
                line,
                message: format!("bad integer '{x}'"),
            })
        })
        .collect()
}

pub fn read_dead_log<R: BufRead>(r: R) -> Result<Vec<DeadRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let mut parts = header.split('\t');
    if parts.next() != Some(DEAD_LOG_TAG) {
        return Err(NestError::Parse {
            line: 1,
            message: "not a dead-point log".into(),
        });
    }
    if parts.next().and_then(|v| v.parse::<u32>().ok()) != Some(RUN_FORMAT_VERSION) {
        return Err(NestError::Parse {
            line: 1,
            message: "unsupported dead-point log version".into(),
        });
    }
    let _columns = lines.next().transpose()?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 3;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(NestError::Parse {
                line: ln,
                message: format!("expected 8 fields, found {}", f.len()),
            });
        }
        let bad = |what: &str| NestError::Parse {
            line: ln,
            message: format!("bad {what}"),
        };
        let orders = parse_list(f[6], ln)?;
        let nlives = parse_list(f[7], ln)?;
        if orders.len() != nlives.len() {
            return Err(bad("insertion columns"));
        }
        rows.push(DeadRow {
            iteration: f[0].parse().map_err(|_| bad("iteration"))?,
            node: f[1].parse().map_err(|_| bad("node"))?,
            log_likelihood: f[2].parse().map_err(|_| bad("logl"))?,
            log_volume: f[3].parse().map_err(|_| bad("logv"))?,
            log_weight: f[4].parse().map_err(|_| bad("logw"))?,
            n_live: f[5].parse().map_err(|_| bad("nlive"))?,
            insertions: orders
                .into_iter()
                .zip(nlives)
                .map(|(o, n)| InsertionRecord::new(o, n))
                .collect::<Result<_>>()
                .map_err(|_| bad("insertion order"))?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseReport {
    /// (iteration, full-run z, rolling z) after each insertion.
    pub trace: Vec<(usize, f64, f64)>,
    pub segment_lengths: Vec<usize>,
    pub segment_flagged: bool,
    pub insertions: usize,
}

/// Offline U test over a dead-point log.
pub fn diagnose_dead_log(
    rows: &[DeadRow],
    window: usize,
    threshold: f64,
) -> Result<DiagnoseReport> {
    let mut full = UTestAccumulator::new();
    let mut rolling = UTestAccumulator::with_window(window)?;
    let mut trace = Vec::new();
    let mut all = Vec::new();
    for r in rows {
        for rec in &r.insertions {
            full.push(*rec);
            rolling.push(*rec);
            all.push(*rec);
            trace.push((r.iteration, full.z_score()?, rolling.z_score()?));
        }
    }
    let seg = run_segment_monitor(threshold, all.iter().copied())?;
    Ok(DiagnoseReport {
        trace,
        segment_lengths: seg.lengths,
        segment_flagged: seg.flagged,
        insertions: all.len(),
    })
}
