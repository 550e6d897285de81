use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nestkit::experiments::{
    acceptance_scaling, cost_curve, default_diamond_samplers, diamond_ring_benchmark,
    suggested_live_points, utest_power, Scenario,
};
use nestkit::integrator::ShrinkageEstimator;
use nestkit::problems::{ProblemParams, BUILTIN};
use nestkit::run::{
    diagnose_dead_log, merge_runs, read_dead_log, AgentKind, Outcome, ProblemSpec, RunConfig,
    SamplerSpec, Session, RESULTS_FILE, SAMPLER_KINDS,
};
use nestkit::termination::{PlateauMode, TerminationPolicy};
use nestkit::NestError;

const SEED_ENV: &str = "NESTKIT_SEED";
const EXIT_USAGE: u8 = 2;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(
    name = "nestkit",
    version,
    about = "Nested sampling with exploration trees"
)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run inference on a built-in or user problem.
    Run(Box<RunArgs>),
    /// Continue an interrupted run from its directory or tree file.
    Resume {
        path: PathBuf,
        #[arg(long, hide = true)]
        interrupt_after: Option<usize>,
    },
    /// Merge completed runs of the same problem.
    Merge {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insertion-rank diagnostics from a dead-point log.
    Diagnose {
        dead_log: PathBuf,
        #[arg(long, default_value_t = 1000)]
        window: usize,
        #[arg(long, default_value_t = 4.0)]
        threshold: f64,
    },
    /// Reproduce a scripted study.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
    /// Built-in problems.
    Problems {
        #[command(subcommand)]
        which: ProblemsCmd,
    },
}

#[derive(Subcommand)]
enum ProblemsCmd {
    List,
}

#[derive(Subcommand)]
enum Experiment {
    AcceptanceScaling {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 40)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    UtestPower {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    DiamondRing {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        nlive: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Classic,
    Dynamic,
    PosteriorWeight,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Arithmetic,
    Geometric,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in problem name (see `problems list`).
    #[arg(long, required_unless_present_any = ["config", "resume"])]
    problem: Option<String>,
    /// Config file of a user problem.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "d")]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long, default_value = "mlfriends")]
    sampler: String,
    /// Steps per sample for step samplers.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Auto-tune the step count by move distance.
    #[arg(long)]
    adapt: bool,
    #[arg(long)]
    region_filter: bool,
    #[arg(long, value_enum, default_value = "classic")]
    agent: AgentArg,
    #[arg(long, default_value_t = 400)]
    nlive: usize,
    #[arg(long)]
    nlive_min: Option<usize>,
    #[arg(long)]
    target_ess: Option<f64>,
    #[arg(long)]
    target_logz_err: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    min_h_factor: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value = "remove-without-replacement")]
    plateau_mode: String,
    #[arg(long, value_enum, default_value = "arithmetic")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Resume the run whose tree file (or directory) is given.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, hide = true)]
    interrupt_after: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Interrupted(String),
}

impl From<NestError> for Failure {
    fn from(e: NestError) -> Self {
        match e {
            NestError::UnknownProblem(_) | NestError::InvalidArgument(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn seed_override(seed: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn build_config(a: &RunArgs, jobs: usize) -> Result<RunConfig, Failure> {
    let plateau_mode: PlateauMode = a.plateau_mode.parse().map_err(Failure::from)?;
    let problem = ProblemSpec {
        name: a.problem.clone().unwrap_or_default(),
        params: ProblemParams {
            dim: a.dim,
            sigma: a.sigma,
            radius: a.radius,
            width: a.width,
        },
        config: a.config.clone(),
    };
    Ok(RunConfig {
        problem,
        sampler: SamplerSpec {
            kind: a.sampler.clone(),
            steps: a.steps,
            adapt: a.adapt,
            region_filter: a.region_filter,
        },
        agent: match a.agent {
            AgentArg::Classic => AgentKind::Classic,
            AgentArg::Dynamic => AgentKind::Dynamic,
            AgentArg::PosteriorWeight => AgentKind::PosteriorWeight,
        },
        n_live: a.nlive,
        n_live_min: a.nlive_min,
        target_ess: a.target_ess,
        target_log_z_err: a.target_logz_err,
        policy: TerminationPolicy {
            epsilon_remainder: a.eps,
            min_iterations_factor: a.min_h_factor,
            max_iterations: a.max_iter,
            plateau_mode,
        },
        estimator: match a.estimator {
            EstimatorArg::Arithmetic => ShrinkageEstimator::Arithmetic,
            EstimatorArg::Geometric => ShrinkageEstimator::Geometric,
        },
        seed: seed_override(a.seed)?,
        jobs,
        ..RunConfig::default()
    })
}

fn install_interrupt() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    // A second handler cannot be installed; runs still work without one.
    let _ = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst));
    flag
}

fn drive(mut session: Session, interrupt_after: Option<usize>) -> Result<(), Failure> {
    let flag = install_interrupt();
    let dir = session.dir.clone();
    match session.run(&flag, interrupt_after)? {
        Outcome::Complete(summary) => {
            print!("{}", summary.to_kv());
            eprintln!("results written to {}", dir.join(RESULTS_FILE).display());
            Ok(())
        }
        Outcome::Interrupted { iteration } => Err(Failure::Interrupted(format!(
            "interrupted at iteration {iteration}; continue with `nestkit resume {}`",
            dir.display()
        ))),
    }
}

fn cmd_run(a: &RunArgs, jobs: usize) -> Result<(), Failure> {
    if let Some(path) = &a.resume {
        return drive(Session::resume(path)?, a.interrupt_after);
    }
    let config = build_config(a, jobs)?;
    config.validate()?;
    drive(Session::start(config, &a.out)?, a.interrupt_after)
}

fn cmd_merge(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let report = merge_runs(runs, out)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_kv());
    Ok(())
}

fn cmd_diagnose(path: &Path, window: usize, threshold: f64) -> Result<(), Failure> {
    let rows = read_dead_log(BufReader::new(fs::File::open(path)?))?;
    let rep = diagnose_dead_log(&rows, window, threshold)?;
    let mut s = String::from("iteration\tz\tz_rolling\n");
    for (it, z, zr) in &rep.trace {
        let _ = writeln!(s, "{it}\t{z}\t{zr}");
    }
    let _ = writeln!(s, "# insertions={}", rep.insertions);
    let _ = writeln!(s, "# segments={}", rep.segment_lengths.len());
    let lens: Vec<String> = rep.segment_lengths.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(s, "# segment_lengths={}", lens.join(","));
    let _ = writeln!(s, "# segment_flagged={}", rep.segment_flagged);
    std::io::stdout().write_all(s.as_bytes())?;
    Ok(())
}

fn write_experiment<C: Serialize>(
    out: &Path,
    name: &str,
    table: &str,
    config: &C,
) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{name}.tsv")), table)?;
    let manifest = serde_json::json!({
        "format_version": nestkit::run::RUN_FORMAT_VERSION,
        "experiment": name,
        "config": config,
    });
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(out.join("manifest.json"), text)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct ScalingConfig {
    pairs: Vec<(usize, usize)>,
    rounds: usize,
    repeats: usize,
    seed: u64,
}

#[derive(Serialize)]
struct PowerConfig {
    n_list: Vec<usize>,
    scenarios: Vec<Scenario>,
    trials: usize,
    seed: u64,
}

#[derive(Serialize)]
struct DiamondConfig {
    samplers: Vec<(String, SamplerSpec)>,
    n_live: usize,
    seeds: Vec<u64>,
}

fn cmd_experiment(which: &Experiment) -> Result<(), Failure> {
    match which {
        Experiment::AcceptanceScaling {
            out,
            rounds,
            repeats,
            seed,
        } => {
            let seed = seed_override(*seed)?;
            let mut pairs = vec![(2, 100), (2, 400), (4, 400), (8, 2000)];
            pairs.extend([2, 4, 8].map(|d| (d, suggested_live_points(d, 0))));
            let rows = acceptance_scaling(&pairs, *rounds, *repeats, seed)?;
            let mut t = format!(
                "#nestkit-experiment\t{}\nd\tn\talpha_mean\talpha_sd\talpha_formula\tnote\n",
                nestkit::run::RUN_FORMAT_VERSION
            );
            for r in &rows {
                let _ = writeln!(
                    t,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    r.d,
                    r.n,
                    r.measured_mean,
                    r.measured_sd,
                    r.formula,
                    r.note.as_deref().unwrap_or("-")
                );
            }
            let _ = writeln!(
                t,
                "# cost curve, ln K = 1 per unit of information, eps = 1e-3"
            );
            let _ = writeln!(t, "# d\tn\talpha\tcost_per_parameter_info\tcost_fixed_info");
            for c in cost_curve(&[1, 2, 4, 8, 16, 32], 1.0, 1e-3, 0)? {
                let _ = writeln!(
                    t,
                    "# {}\t{}\t{}\t{}\t{}",
                    c.d, c.n, c.alpha, c.cost_per_parameter_information, c.cost_fixed_information
                );
            }
            let cfg = ScalingConfig {
                pairs,
                rounds: *rounds,
                repeats: *repeats,
                seed,
            };
            write_experiment(out, "acceptance-scaling", &t, &cfg)
        }
        Experiment::UtestPower { out, trials, seed } => {
            let seed = seed_override(*seed)?;
            let n_list = vec![1000, 400, 100];
            let scenarios = vec![
                Scenario::Coverage(0.9),
                Scenario::Coverage(0.96),
                Scenario::Coverage(0.98),
                Scenario::Coverage(1.0),
                Scenario::Slant(0.9),
                Scenario::Slant(0.96),
                Scenario::Slant(0.98),
            ];
            let rows = utest_power(&n_list, &scenarios, *trials, seed)?;
            let mut t = format!(
                "#nestkit-experiment\t{}\nn\tscenario\tparameter\ttrials\tks_fraction\tu_fraction\n",
                nestkit::run::RUN_FORMAT_VERSION
            );
            for r in &rows {
                let _ = writeln!(
                    t,
                    "{}\t{}\t{}\t{}\t{}",
                    r.n,
                    r.scenario.label(),
                    r.trials,
                    r.ks_fraction,
                    r.u_fraction
                );
            }
            let cfg = PowerConfig {
                n_list,
                scenarios,
                trials: *trials,
                seed,
            };
            write_experiment(out, "utest-power", &t, &cfg)
        }
        Experiment::DiamondRing { out, nlive, seeds } => {
            let first = seed_override(1)?;
            let seeds: Vec<u64> = (0..*seeds).map(|i| first + i).collect();
            let samplers = default_diamond_samplers();
            let rows = diamond_ring_benchmark(&samplers, *nlive, &seeds);
            let mut t = format!(
                "#nestkit-experiment\t{}\nsampler\tseed\tevals\tess\tess_per_eval\tlog_z\tlog_z_err\toracle\twithin_3_sigma\tplateau\tstep_rises\terror\n",
                nestkit::run::RUN_FORMAT_VERSION
            );
            for r in &rows {
                let _ = writeln!(
                    t,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.label,
                    r.seed,
                    r.evals,
                    r.ess,
                    r.ess_per_eval(),
                    r.log_z,
                    r.log_z_err,
                    r.oracle,
                    r.within_3_sigma,
                    r.plateau.map_or("-".into(), |(a, b)| format!("{a}-{b}")),
                    r.step_rises,
                    r.error.as_deref().unwrap_or("-")
                );
            }
            fs::create_dir_all(out)?;
            for r in &rows {
                let mut tr = String::from("iteration\tlog_z\n");
                for (i, z) in r.log_z_trace.iter().enumerate() {
                    let _ = writeln!(tr, "{}\t{z}", i + 1);
                }
                fs::write(out.join(format!("trace-{}-{}.tsv", r.label, r.seed)), tr)?;
                let mut st = String::from("call\tsteps\n");
                for (i, s) in r.steps_trace.iter().enumerate() {
                    let _ = writeln!(st, "{}\t{s}", i + 1);
                }
                fs::write(out.join(format!("steps-{}-{}.tsv", r.label, r.seed)), st)?;
            }
            let cfg = DiamondConfig {
                samplers,
                n_live: *nlive,
                seeds,
            };
            write_experiment(out, "diamond-ring", &t, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be positive");
        return ExitCode::from(EXIT_USAGE);
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, cli.jobs),
        Command::Resume {
            path,
            interrupt_after,
        } => Session::resume(path)
            .map_err(Failure::from)
            .and_then(|s| drive(s, *interrupt_after)),
        Command::Merge { runs, out } => cmd_merge(runs, out),
        Command::Diagnose {
            dead_log,
            window,
            threshold,
        } => cmd_diagnose(dead_log, *window, *threshold),
        Command::Experiment { which } => cmd_experiment(which),
        Command::Problems {
            which: ProblemsCmd::List,
        } => {
            for (name, desc) in BUILTIN {
                println!("{name}\t{desc}");
            }
            println!("samplers\t{}", SAMPLER_KINDS.join(", "));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
        Err(Failure::Interrupted(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_INTERRUPTED)
        }
    }
}
