use nestkit::diagnostics::shrinkage_test;
use nestkit::experiments::diamond_ring_run;
use nestkit::lrps::Sampler;
use nestkit::problems::HyperRectangle;
use nestkit::run::SamplerSpec;
use nestkit::step::{StepKind, StepSamplerConfig};

fn harm(steps: usize) -> Sampler {
    Sampler::step(StepSamplerConfig::new(StepKind::Harm, steps)).unwrap()
}

#[test]
fn shrinkage_test_accepts_a_mixed_walk() {
    let problem = HyperRectangle { dim: 4 };
    let trials = 20;
    let zs: Vec<f64> = (0..trials)
        .map(|t| {
            shrinkage_test(&problem, harm(16), 100, 5000, 300 + t)
                .unwrap()
                .z
        })
        .collect();
    let good = zs.iter().filter(|z| z.abs() < 3.0).count();
    assert!(good >= 19, "16 steps: {good}/{trials}, z = {zs:?}");
}

#[test]
fn mlfriends_cost_per_ess_improves_with_live_points() {
    let spec = SamplerSpec {
        kind: "mlfriends".into(),
        steps: 1,
        adapt: false,
        region_filter: false,
    };
    let small = diamond_ring_run("mlfriends", &spec, 100, 1);
    let large = diamond_ring_run("mlfriends", &spec, 400, 1);
    assert!(small.error.is_none() && large.error.is_none());
    assert!(
        large.ess_per_eval() > small.ess_per_eval(),
        "{} vs {}",
        large.ess_per_eval(),
        small.ess_per_eval()
    );
}
