mod common;

use rand::Rng;
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use nestkit::agents::run_classic;
use nestkit::diagnostics::{ks_test, z_of, InsertionRecord};
use nestkit::integrator::{shrink_fraction, ShrinkageEstimator};
use nestkit::linalg::Metric;
use nestkit::lrps::Sampler;
use nestkit::priors::{Component, PriorTransform};
use nestkit::problems::{DiamondRing, Gaussian, HeavyTail, HyperRectangle, Problem, StepPlateau};
use nestkit::region::Ellipsoid;
use nestkit::rng_from_seed;
use nestkit::step::{slice_step, DirectionMode, StepGeometry, WalkState};
use nestkit::termination::TerminationPolicy;

use common::{diamond_ring_log_z, gaussian_box_log_z, ks_pvalue, ks_statistic, ring_term};

#[test]
fn diamond_ring_quadrature_converges_and_matches_problem() {
    let coarse = diamond_ring_log_z(200);
    let fine = diamond_ring_log_z(400);
    assert!(((coarse - fine) / fine).abs() < 1e-6, "{coarse} vs {fine}");
    let problem = DiamondRing::default();
    let closed = problem.analytic_log_z().unwrap();
    assert!(((closed - fine) / fine).abs() < 1e-6, "{closed} vs {fine}");

    // The problem's likelihood is the defining formula, evaluated in log space.
    let mut rng = rng_from_seed(4);
    let (r1, w1) = (1e-11, 0.4e-11);
    for _ in 0..1000 {
        let x = (rng.random::<f64>() - 0.5) * 4e-11;
        let y = (rng.random::<f64>() - 0.5) * 4e-11;
        let d1 = x.hypot(y);
        let d2 = (x + r1).hypot(y);
        let l = ring_term(d1, r1, w1) + 100.0 * ring_term(d2, r1 / 40.0, w1 / 40.0);
        let got = problem.log_likelihood(&[x, y]);
        if l > 0.0 {
            assert!(
                (got - l.ln()).abs() < 1e-9 * l.ln().abs().max(1.0),
                "{got} vs {}",
                l.ln()
            );
        } else {
            assert!(got.is_finite() && got < -700.0);
        }
    }
    // Far field underflows in linear space but not in log space.
    assert!(problem.log_likelihood(&[1.0, 1.0]).is_finite());
}

#[test]
fn closed_form_evidences() {
    let g = Gaussian::new(2, 0.01).unwrap();
    assert!((g.analytic_log_z().unwrap() - gaussian_box_log_z(2, 0.01)).abs() < 1e-12);
    assert!(
        (gaussian_box_log_z(2, 0.01) - (2.0 * std::f64::consts::PI * 1e-4 / 4.0).ln()).abs() < 1e-9
    );
    assert!((HeavyTail.analytic_log_z().unwrap() - 101f64.ln()).abs() < 1e-12);
    assert!((StepPlateau.analytic_log_z().unwrap() - 1.5f64.ln()).abs() < 1e-12);

    let h = HyperRectangle { dim: 2 };
    assert!((h.log_likelihood(&[0.25, 0.5]) - 4f64.ln()).abs() < 1e-12);
    assert!((h.log_volume_at(4f64.ln()).unwrap() - 0.25f64.ln()).abs() < 1e-12);
    // Z = 2d/(d-1) by direct integration of the radial density.
    let d = 4.0;
    let z = common::gauss_legendre_composite(|t| d * 2f64.powf(d) * t.powf(d - 2.0), 0.0, 0.5, 20);
    let h4 = HyperRectangle { dim: 4 };
    assert!((h4.analytic_log_z().unwrap() - z.ln()).abs() < 1e-10);
}

fn ks_ok(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sample.len();
    ks_pvalue(ks_statistic(&mut sample, cdf), n)
}

fn push_forward(prior: &PriorTransform, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..prior.dimension_in()).map(|_| rng.random()).collect();
            prior.transform(&u)
        })
        .collect()
}

#[test]
fn prior_push_forward_marginals() {
    let n = 100_000;
    let col = |xs: &[Vec<f64>], i: usize| xs.iter().map(|x| x[i]).collect::<Vec<f64>>();

    let p = PriorTransform::new(vec![
        Component::uniform(-1.0, 3.0).unwrap(),
        Component::normal(2.0, 0.5).unwrap(),
        Component::log_uniform(1.0, 100.0).unwrap(),
    ])
    .unwrap();
    let xs = push_forward(&p, n, 1);
    assert!(ks_ok(col(&xs, 0), |x| ((x + 1.0) / 4.0).clamp(0.0, 1.0)) > 0.01);
    let normal = Normal::new(2.0, 0.5).unwrap();
    assert!(ks_ok(col(&xs, 1), |x| normal.cdf(x)) > 0.01);
    assert!(ks_ok(col(&xs, 2), |x| (x.ln() / 100f64.ln()).clamp(0.0, 1.0)) > 0.01);

    let cov = [1.0, 0.9, 0.9, 1.0];
    let cg = PriorTransform::correlated_gaussian(vec![0.0, 1.0], &cov).unwrap();
    let xs = push_forward(&cg, n, 2);
    let std = Normal::new(0.0, 1.0).unwrap();
    assert!(ks_ok(col(&xs, 0), |x| std.cdf(x)) > 0.01);
    assert!(ks_ok(col(&xs, 1), |x| std.cdf(x - 1.0)) > 0.01);
    // The difference has variance 2 (1 - 0.9).
    let diff: Vec<f64> = xs
        .iter()
        .map(|x| (x[0] - x[1] + 1.0) / 0.2f64.sqrt())
        .collect();
    assert!(ks_ok(diff, |x| std.cdf(x)) > 0.01);
    let m0 = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
    let m1 = xs.iter().map(|x| x[1]).sum::<f64>() / n as f64;
    let c01 = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / (n - 1) as f64;
    // Standard error of a sample covariance: sqrt((1 + rho^2) / n).
    assert!(
        (c01 - 0.9).abs() < 3.0 * (1.81f64 / n as f64).sqrt(),
        "cov {c01}"
    );
    assert_eq!(cg.transform(&[0.5, 0.5]), vec![0.0, 1.0]);

    for k in [2usize, 3] {
        let d = PriorTransform::dirichlet(k).unwrap();
        let xs = push_forward(&d, n, 10 + k as u64);
        let marginal = Beta::new(1.0, (k - 1) as f64).unwrap();
        for i in 0..k {
            assert!(
                ks_ok(col(&xs, i), |x| marginal.cdf(x)) > 0.01,
                "dirichlet k={k} coordinate {i}"
            );
        }
        assert!(xs
            .iter()
            .all(|x| (x.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }
}

#[test]
fn prior_midpoints() {
    let p = PriorTransform::new(vec![
        Component::uniform(-1.0, 1.0).unwrap(),
        Component::normal(0.0, 1.0).unwrap(),
        Component::log_uniform(1.0, 100.0).unwrap(),
    ])
    .unwrap();
    let x = p.transform(&[0.5, 0.5, 0.5]);
    assert!(x[0].abs() < 1e-15 && x[1].abs() < 1e-15 && (x[2] - 10.0).abs() < 1e-12);
    assert!((p.transform(&[0.5, 0.8413447460685429, 0.5])[1] - 1.0).abs() < 1e-9);
    let d = PriorTransform::dirichlet(4).unwrap();
    assert!(d
        .transform(&[0.3; 4])
        .iter()
        .all(|&t| (t - 0.25).abs() < 1e-15));
}

#[test]
fn ellipsoid_samples_are_uniform_in_the_ball() {
    let mut rng = rng_from_seed(8);
    for d in [1usize, 3] {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let e = Ellipsoid::fit(&refs, 0, &mut rng).unwrap();
        let n = 20_000;
        let radii: Vec<f64> = (0..n)
            .map(|_| {
                let s = e.sample(&mut rng);
                assert!(e.contains(&s).unwrap());
                let r2 = e.metric.distance_sq(&s, &e.center) / e.enlargement;
                r2.sqrt().powi(d as i32)
            })
            .collect();
        // Mahalanobis radius^d of a uniform point in the ellipsoid is uniform.
        assert!(ks_ok(radii, |x| x.clamp(0.0, 1.0)) > 0.01, "d={d}");
        assert!(refs.iter().all(|p| e.contains(p).unwrap()));
    }
}

#[test]
fn slice_step_is_uniform_inside_an_interval_contour() {
    // 1-d Gaussian on [-1, 1]: logL > -(0.2)^2 / 2 sigma^2 selects u in [0.4, 0.6].
    let problem = Gaussian::new(1, 0.1).unwrap();
    let threshold = -(0.2f64 * 0.2) / (2.0 * 0.01);
    let metric = Metric::identity(1);
    let geo = StepGeometry {
        metric: &metric,
        region: None,
    };
    let mut rng = rng_from_seed(12);
    let mut evals = 0;
    let sample: Vec<f64> = (0..10_000)
        .map(|_| {
            let (theta, l) = problem.evaluate(&[0.5]);
            let mut s = WalkState::new(vec![0.5], theta, l);
            slice_step(
                &mut s,
                DirectionMode::Axis,
                &geo,
                threshold,
                &problem,
                &mut rng,
            )
            .unwrap();
            evals += s.likelihood_evals;
            s.current[0]
        })
        .collect();
    assert!(sample.iter().all(|&u| (0.4..=0.6).contains(&u)));
    assert!(ks_ok(sample, |u| ((u - 0.4) / 0.2).clamp(0.0, 1.0)) > 0.01);
    assert!((evals as f64 / 10_000.0) < 10.0);
}

#[test]
fn stochastic_shrinkage_mean() {
    let mut rng = rng_from_seed(21);
    let n = 1_000_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            shrink_fraction(ShrinkageEstimator::Stochastic { seed: 0 }, 100, &mut rng).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    // Removed fraction is Beta(1, 100): mean 1/101, variance 100/(101^2 102).
    let se = (100.0 / (101.0f64.powi(2) * 102.0) / n as f64).sqrt();
    assert!((mean - 1.0 / 101.0).abs() < 3.0 * se, "{mean}");
    assert!(
        (shrink_fraction(ShrinkageEstimator::Arithmetic, 400, &mut rng).unwrap() - 1.0 / 401.0)
            .abs()
            < 1e-15
    );
    assert!(
        (shrink_fraction(ShrinkageEstimator::Geometric, 1, &mut rng).unwrap()
            - 0.632_120_558_828_557_7)
            .abs()
            < 1e-12
    );
}

#[test]
fn utest_null_distribution_is_standard_normal() {
    let mut rng = rng_from_seed(5);
    let trials = 1000;
    let zs: Vec<f64> = (0..trials)
        .map(|_| {
            let recs: Vec<InsertionRecord> = (0..10_000)
                .map(|_| {
                    let n = rng.random_range(50..500);
                    InsertionRecord::new(rng.random_range(0..n), n).unwrap()
                })
                .collect();
            z_of(&recs).unwrap()
        })
        .collect();
    let m = zs.iter().sum::<f64>() / trials as f64;
    let v = zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (trials - 1) as f64;
    assert!(m.abs() < 3.0 / (trials as f64).sqrt(), "mean {m}");
    assert!((v - 1.0).abs() < 0.15, "variance {v}");

    let all_zero: Vec<InsertionRecord> = (0..100)
        .map(|_| InsertionRecord::new(0, 100).unwrap())
        .collect();
    assert!((z_of(&all_zero).unwrap() - (-99.0 / (100.0f64 / 3.0).sqrt())).abs() < 1e-9);
    assert!(ks_test(&all_zero).unwrap() < 1e-6);
}

#[test]
fn gaussian_information_gain() {
    let g = Gaussian::new(2, 0.01).unwrap();
    let run = run_classic(
        &g,
        400,
        TerminationPolicy::default(),
        Sampler::mlfriends(),
        ShrinkageEstimator::Arithmetic,
        2,
    )
    .unwrap();
    let expect = (4.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E * 1e-4)).ln();
    let h = run.result.information_gain;
    assert!((h - expect).abs() < 0.1 * expect, "H {h} vs {expect}");
    let oracle = gaussian_box_log_z(2, 0.01);
    assert!((run.result.log_evidence - oracle).abs() < 3.0 * run.result.log_evidence_uncertainty);
}
