//! Shared oracles for the integration tests.
#![allow(dead_code)]

use nestkit::lrps::{Lrps, LrpsRequest, Sampler};
use nestkit::problems::Problem;
use nestkit::rng_from_seed;
use statrs::function::erf::erf;

/// log Z of exp(-|x|^2 / 2 sigma^2) averaged over [-1, 1]^d.
pub fn gaussian_box_log_z(d: usize, sigma: f64) -> f64 {
    let one_dim =
        (2.0 * std::f64::consts::PI).sqrt() * sigma * erf(1.0 / (sigma * 2f64.sqrt())) / 2.0;
    d as f64 * one_dim.ln()
}

/// Composite Gauss-Legendre rule on [a, b]: `panels` panels of the 20-point rule.
pub fn gauss_legendre_composite(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    // 20-point nodes and weights on [-1, 1] (positive half).
    const X: [f64; 10] = [
        0.076_526_521_133_497_33,
        0.227_785_851_141_645_08,
        0.373_706_088_715_419_56,
        0.510_867_001_950_827_1,
        0.636_053_680_726_515,
        0.746_331_906_460_150_8,
        0.839_116_971_822_218_8,
        0.912_234_428_251_326,
        0.963_971_927_277_913_8,
        0.993_128_599_185_094_9,
    ];
    const W: [f64; 10] = [
        0.152_753_387_130_725_85,
        0.149_172_986_472_603_75,
        0.142_096_109_318_382_05,
        0.131_688_638_449_176_63,
        0.118_194_531_961_518_42,
        0.101_930_119_817_240_44,
        0.083_276_741_576_704_75,
        0.062_672_048_334_109_06,
        0.040_601_429_800_386_94,
        0.017_614_007_139_152_12,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        for k in 0..10 {
            total += W[k] * half * (f(mid + half * X[k]) + f(mid - half * X[k]));
        }
    }
    total
}

/// One ring term of the diamond ring, from its definition.
pub fn ring_term(rho: f64, r: f64, w: f64) -> f64 {
    (2.0 * std::f64::consts::PI * w).powf(-0.5) * (-0.5 * ((rho - r) / w).powi(2)).exp()
}

/// Polar quadrature of one ring around its own centre: Gauss-Legendre in
/// radius over +-8 widths; the integrand has no angular dependence.
pub fn ring_quadrature(r: f64, w: f64, panels: usize) -> f64 {
    let lo = (r - 8.0 * w).max(0.0);
    let hi = r + 8.0 * w;
    2.0 * std::f64::consts::PI
        * gauss_legendre_composite(|rho| rho * ring_term(rho, r, w), lo, hi, panels)
}

/// Diamond-ring log Z: both rings summed with weights 1 and 100, divided by
/// the prior area 4.
pub fn diamond_ring_log_z(panels: usize) -> f64 {
    let r1 = 1e-11;
    let w1 = 0.4 * r1;
    let (r2, w2) = (r1 / 40.0, w1 / 40.0);
    let z = ring_quadrature(r1, w1, panels) + 100.0 * ring_quadrature(r2, w2, panels);
    (z / 4.0).ln()
}

/// Two-sided KS statistic of a sample against a continuous CDF.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut q = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        q += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefDead {
    pub id: usize,
    pub log_likelihood: f64,
    pub log_weight: f64,
    pub n_live: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefNode {
    pub parent: usize,
    pub unit: Vec<f64>,
    pub log_likelihood: f64,
}

pub struct RefRun {
    pub nodes: Vec<RefNode>,
    pub dead: Vec<RefDead>,
    pub log_z: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One dead point: returns (log weight, log X, log Z, H) after it.
fn accumulate(
    log_x: f64,
    log_z: f64,
    info: f64,
    logl: f64,
    n: usize,
    drain: bool,
) -> (f64, f64, f64, f64) {
    let nf = n as f64;
    let (log_removed, log_remaining) = if drain {
        (
            -nf.ln(),
            if n == 1 {
                f64::NEG_INFINITY
            } else {
                ((nf - 1.0) / nf).ln()
            },
        )
    } else {
        (-(nf + 1.0).ln(), (nf / (nf + 1.0)).ln())
    };
    let log_w = logl + log_x + log_removed;
    let z_new = log_add(log_z, log_w);
    let a = (log_w - z_new).exp() * logl;
    let b = if log_z > f64::NEG_INFINITY {
        (log_z - z_new).exp() * (info + log_z)
    } else {
        0.0
    };
    (log_w, log_x + log_remaining, z_new, a + b - z_new)
}

/// Straight-line nested sampling: a sorted live list, arithmetic shrinkage,
/// remainder stopping, and an equal split of the remaining volume among the
/// final live points. Node ids follow creation order with the root as 0.
pub fn reference_ns(
    problem: &dyn Problem,
    n_live: usize,
    eps: f64,
    mut sampler: Sampler,
    seed: u64,
) -> RefRun {
    let mut rng = rng_from_seed(seed);
    let mut nodes = vec![RefNode {
        parent: usize::MAX,
        unit: vec![],
        log_likelihood: f64::NEG_INFINITY,
    }];
    // (logl, id)
    let mut live: Vec<(f64, usize)> = Vec::new();
    for _ in 0..n_live {
        let req = LrpsRequest {
            threshold: f64::NEG_INFINITY,
            live_unit: &[],
            live_logl: &[],
        };
        let p = sampler
            .sample(problem, &req, &mut rng)
            .expect("initial draw");
        nodes.push(RefNode {
            parent: 0,
            unit: p.unit,
            log_likelihood: p.log_likelihood,
        });
        live.push((p.log_likelihood, nodes.len() - 1));
    }
    let mut log_x = 0.0f64;
    let mut log_z = f64::NEG_INFINITY;
    let mut info = 0.0f64;
    let mut dead = Vec::new();
    let mut stopped = false;
    while !live.is_empty() {
        live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = live.len();
        let (logl, id) = live.remove(0);
        let saved = (log_x, log_z, info);
        let (mut log_w, mut new_x, mut new_z, mut new_h) =
            accumulate(log_x, log_z, info, logl, n, stopped);
        let iteration = dead.len() + 1;
        if !stopped {
            assert!(
                live.first().is_none_or(|l| l.0 != logl),
                "reference run does not handle ties"
            );
            let l_max = live.iter().map(|l| l.0).fold(logl, f64::max);
            if (iteration as f64) >= new_h * n as f64 && l_max + new_x - new_z < eps.ln() {
                // The stopping node joins the final equal split.
                stopped = true;
                (log_w, new_x, new_z, new_h) = accumulate(saved.0, saved.1, saved.2, logl, n, true);
            }
        }
        log_x = new_x;
        log_z = new_z;
        info = new_h;
        dead.push(RefDead {
            id,
            log_likelihood: logl,
            log_weight: log_w,
            n_live: n,
        });
        if stopped {
            continue;
        }
        let pts: Vec<&[f64]> = live
            .iter()
            .map(|&(_, i)| nodes[i].unit.as_slice())
            .collect();
        let lls: Vec<f64> = live.iter().map(|l| l.0).collect();
        let req = LrpsRequest {
            threshold: logl,
            live_unit: &pts,
            live_logl: &lls,
        };
        let p = sampler
            .sample(problem, &req, &mut rng)
            .expect("replacement draw");
        nodes.push(RefNode {
            parent: id,
            unit: p.unit,
            log_likelihood: p.log_likelihood,
        });
        live.push((p.log_likelihood, nodes.len() - 1));
    }
    RefRun { nodes, dead, log_z }
}

/// Prior volume of the 2-d box Gaussian's contour at radius r, and its
/// derivative: the disc of radius r clipped to [-1, 1]^2, over the box area.
pub fn box_disc_volume(r: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    if r <= 1.0 {
        (PI * r * r / 4.0, PI * r / 2.0)
    } else {
        let a = (1.0 / r).acos();
        let area = PI * r * r - 4.0 * (r * r * a - (r * r - 1.0).sqrt());
        let perimeter = 2.0 * PI * r - 8.0 * r * a;
        (area / 4.0, perimeter / 4.0)
    }
}

/// Expected evidence estimate of nested sampling with N live points and
/// shell fractions 1/(N+1) in expectation: dead points form a Poisson
/// process of rate N in -ln X, which weights the integrand by
/// N/(N+1) X^{-1/(N+1)}.
pub fn gaussian_box_estimator_mean(sigma: f64, n: usize) -> f64 {
    let nf = n as f64;
    let f = |r: f64| {
        let (x, dx) = box_disc_volume(r);
        (-r * r / (2.0 * sigma * sigma)).exp() * x.powf(-1.0 / (nf + 1.0)) * dx
    };
    let inner = gauss_legendre_composite(f, 0.0, 1.0, 200);
    let outer = gauss_legendre_composite(f, 1.0, 2f64.sqrt(), 50);
    nf / (nf + 1.0) * (inner + outer)
}
