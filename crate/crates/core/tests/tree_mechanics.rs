mod common;

use std::collections::BTreeSet;
use std::sync::atomic::AtomicBool;

use nestkit::agents::run_classic;
use nestkit::integrator::{estimate_uncertainty, integrate, ShrinkageEstimator};
use nestkit::lrps::Sampler;
use nestkit::problems::{Gaussian, Problem};
use nestkit::run::{
    merge_trees_report, Outcome, ProblemSpec, RunConfig, SamplerSpec, Session, RESULTS_FILE,
    TREE_FILE,
};
use nestkit::step::{StepKind, StepSamplerConfig};
use nestkit::termination::TerminationPolicy;
use nestkit::{ExplorationTree, Reattach, ROOT};

fn classic(
    problem: &dyn Problem,
    n: usize,
    sampler: Sampler,
    seed: u64,
) -> nestkit::agents::ClassicRun {
    run_classic(
        problem,
        n,
        TerminationPolicy::default(),
        sampler,
        ShrinkageEstimator::Arithmetic,
        seed,
    )
    .unwrap()
}

fn assert_matches_reference(sampler: Sampler, seed: u64) {
    let problem = Gaussian::new(2, 0.01).unwrap();
    let reference = common::reference_ns(&problem, 50, 1e-3, sampler.clone(), seed);
    let run = classic(&problem, 50, sampler, seed);
    assert_eq!(run.tree.len(), reference.nodes.len());
    for (id, r) in reference.nodes.iter().enumerate().skip(1) {
        let n = run.tree.get(id).unwrap();
        assert_eq!(n.parent, Some(r.parent), "parent of node {id}");
        assert_eq!(n.log_likelihood.to_bits(), r.log_likelihood.to_bits());
        let bits: Vec<u64> = n.point_unit.iter().map(|x| x.to_bits()).collect();
        let rbits: Vec<u64> = r.unit.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, rbits, "point of node {id}");
    }
    assert_eq!(run.state.dead_points.len(), reference.dead.len());
    for (d, r) in run.state.dead_points.iter().zip(&reference.dead) {
        assert_eq!(d.node, r.id);
        assert_eq!(d.n_live, r.n_live);
        assert_eq!(d.log_weight.to_bits(), r.log_weight.to_bits());
    }
    assert_eq!(run.result.log_evidence.to_bits(), reference.log_z.to_bits());
}

#[test]
fn classic_agent_matches_straight_line_reference() {
    for seed in [1, 2] {
        assert_matches_reference(Sampler::mlfriends(), seed);
        assert_matches_reference(Sampler::ellipsoid(), seed);
        assert_matches_reference(
            Sampler::step(StepSamplerConfig::new(StepKind::Harm, 8)).unwrap(),
            seed,
        );
    }
}

#[test]
fn serialized_run_integrates_identically() {
    let problem = Gaussian::new(2, 0.05).unwrap();
    let run = classic(&problem, 60, Sampler::mlfriends(), 5);
    let back = ExplorationTree::from_bytes(&run.tree.to_bytes()).unwrap();
    assert_eq!(back, run.tree);
    let a = integrate(&run.tree, ShrinkageEstimator::Arithmetic).unwrap();
    let b = integrate(&back, ShrinkageEstimator::Arithmetic).unwrap();
    assert_eq!(a, b);
}

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        problem: ProblemSpec::builtin("gaussian"),
        sampler: SamplerSpec::default(),
        n_live: 100,
        seed,
        checkpoint_every: 200,
        resamples: 5,
        equal_weight_samples: 50,
        ..Default::default()
    }
}

#[test]
fn interrupted_and_resumed_run_equals_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let stop = AtomicBool::new(false);

    let mut s = Session::start(small_config(9), &full).unwrap();
    assert!(matches!(s.run(&stop, None).unwrap(), Outcome::Complete(_)));

    let mut s = Session::start(small_config(9), &part).unwrap();
    assert!(matches!(
        s.run(&stop, Some(450)).unwrap(),
        Outcome::Interrupted { .. }
    ));
    drop(s);
    let mut s = Session::resume(&part.join(TREE_FILE)).unwrap();
    assert!(matches!(s.run(&stop, None).unwrap(), Outcome::Complete(_)));

    for f in [
        TREE_FILE,
        RESULTS_FILE,
        "dead.tsv",
        "posterior.tsv",
        "equal_weight.tsv",
    ] {
        let a = std::fs::read(full.join(f)).unwrap();
        let b = std::fs::read(part.join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn merge_identities() {
    let problem = Gaussian::new(2, 0.05).unwrap();
    let a = classic(&problem, 40, Sampler::mlfriends(), 1).tree;
    let b = classic(&problem, 40, Sampler::mlfriends(), 2).tree;

    let single = ExplorationTree::merge(std::slice::from_ref(&a)).unwrap();
    assert_eq!(single, a);

    let m = ExplorationTree::merge(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(m.len(), a.len() + b.len() - 1);
    assert_eq!(m.root().children.len(), 80);
    // The first tree's nodes keep their ids.
    for n in a.nodes() {
        assert_eq!(
            m.get(n.id).unwrap().log_likelihood.to_bits(),
            n.log_likelihood.to_bits()
        );
    }
    // Unlinking the second run's root children recovers the first run exactly.
    let keep: BTreeSet<usize> = (0..40).collect();
    let view = m.unlink_root_children(&keep, Reattach::None).unwrap();
    assert_eq!(view.node_count(), a.len());
    let rv = integrate(&view, ShrinkageEstimator::Arithmetic).unwrap();
    let ra = integrate(&a, ShrinkageEstimator::Arithmetic).unwrap();
    assert_eq!(rv.log_evidence.to_bits(), ra.log_evidence.to_bits());
}

#[test]
fn merged_runs_behave_like_one_larger_run() {
    let problem = Gaussian::new(2, 0.01).unwrap();
    let oracle = common::gaussian_box_log_z(2, 0.01);
    let trees: Vec<ExplorationTree> = (1..=4)
        .map(|s| classic(&problem, 100, Sampler::mlfriends(), s).tree)
        .collect();
    let (merged, report) = merge_trees_report(&trees).unwrap();
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    let state = nestkit::integrator::Integrator::new(&merged, ShrinkageEstimator::Arithmetic)
        .unwrap()
        .run(&merged)
        .unwrap();
    let hist = state.live_count_history();
    let bulk = &hist[100..hist.len() / 2];
    assert!(
        bulk.iter().all(|&n| (396..=400).contains(&n)),
        "live counts through the bulk"
    );
    assert!((report.log_z - oracle).abs() < 3.0 * report.log_z_err);

    let single = classic(&problem, 400, Sampler::mlfriends(), 11).result;
    let joint = (report.log_z_err.powi(2) + single.log_evidence_uncertainty.powi(2)).sqrt();
    assert!((report.log_z - single.log_evidence).abs() < 3.0 * joint);
}

#[test]
fn fold_spread_matches_classic_error() {
    let problem = Gaussian::new(2, 0.01).unwrap();
    let run = classic(&problem, 400, Sampler::mlfriends(), 3);
    let classic_err = run.result.log_evidence_uncertainty;
    let h = run.result.information_gain;
    assert!((classic_err - (h / 400.0).sqrt()).abs() < 0.05 * classic_err);
    let boot = estimate_uncertainty(&run.tree, 5, 20, 7, Reattach::None).unwrap();
    assert!(
        boot > classic_err / 3.0 && boot < classic_err * 3.0,
        "{boot} vs {classic_err}"
    );

    // K=4 views without re-attachment: each view is an N/4 run.
    let zs: Vec<f64> = (0..4)
        .map(|k| {
            let keep: BTreeSet<usize> = (k..400).step_by(4).collect();
            let v = run
                .tree
                .unlink_root_children(&keep, Reattach::None)
                .unwrap();
            integrate(&v, ShrinkageEstimator::Arithmetic)
                .unwrap()
                .log_evidence
        })
        .collect();
    let m = zs.iter().sum::<f64>() / 4.0;
    let sd = (zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    let expect = (h / 100.0).sqrt();
    assert!(
        sd > expect / 3.0 && sd < expect * 3.0,
        "fold sd {sd} vs {expect}"
    );
}

#[test]
fn view_keeping_everything_is_the_tree() {
    let problem = Gaussian::new(2, 0.05).unwrap();
    let run = classic(&problem, 30, Sampler::mlfriends(), 4);
    let all: BTreeSet<usize> = (0..30).collect();
    let v = run
        .tree
        .unlink_root_children(&all, Reattach::Threshold)
        .unwrap();
    assert_eq!(v.node_count(), run.tree.len());
    let a = integrate(&v, ShrinkageEstimator::Arithmetic).unwrap();
    assert_eq!(a.log_evidence.to_bits(), run.result.log_evidence.to_bits());
    assert_eq!(run.tree.root().children.len(), 30);
    assert!(run.tree.get(ROOT).unwrap().log_likelihood == f64::NEG_INFINITY);
}
