//! Bounding regions fitted to live points in unit-cube coordinates: a single
//! bootstrapped ellipsoid, and MLFriends (a union of equal ellipsoids around
//! every live point).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::linalg::{covariance, random_in_ball, sq_dist, Metric};
use crate::special::log_unit_ball_volume;

pub const DEFAULT_BOOTSTRAP_ROUNDS: usize = 50;
pub const MAX_CLUSTER_ITERATIONS: usize = 10;
/// Relative slack so the defining points stay inside despite rounding.
const CONTAINMENT_MARGIN: f64 = 1e-9;

fn check_points(points: &[&[f64]], min: usize) -> Result<usize> {
    if points.len() < min {
        return Err(NestError::invalid(format!(
            "need at least {min} points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(NestError::invalid("points have inconsistent dimension"));
    }
    Ok(d)
}

/// Bootstrap split: indices drawn with replacement, and the ones never drawn.
fn bootstrap_split<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut chosen = vec![false; n];
    let sel: Vec<usize> = (0..n)
        .map(|_| {
            let i = rng.random_range(0..n);
            chosen[i] = true;
            i
        })
        .collect();
    let out = (0..n).filter(|&i| !chosen[i]).collect();
    (sel, out)
}

/// Points p with (p - c)^T S^{-1} (p - c) <= enlargement, S = L L^T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    pub metric: Metric,
    pub enlargement: f64,
}

impl Ellipsoid {
    /// Covariance scaled so the farthest point sits on the boundary; also
    /// returns the scale applied.
    fn fit_tight(points: &[&[f64]]) -> Result<(Ellipsoid, f64)> {
        let d = points[0].len();
        let (center, mut cov) = covariance(points);
        let base = Metric::from_covariance(&cov, d)?;
        let k = points
            .iter()
            .map(|p| base.distance_sq(p, &center))
            .fold(0.0, f64::max)
            * (1.0 + CONTAINMENT_MARGIN);
        if !(k > 0.0) {
            return Err(NestError::DegenerateGeometry("all points coincide".into()));
        }
        cov.iter_mut().for_each(|c| *c *= k);
        let e = Ellipsoid {
            center,
            metric: Metric::from_covariance(&cov, d)?,
            enlargement: 1.0,
        };
        Ok((e, k))
    }

    /// Sample mean and covariance of all points, enlarged by the largest
    /// factor that recovers the left-out points of a bootstrap sub-fit, and
    /// never less than what encloses every point.
    pub fn fit<R: Rng + ?Sized>(
        points: &[&[f64]],
        bootstrap_rounds: usize,
        rng: &mut R,
    ) -> Result<Ellipsoid> {
        let d = check_points(points, 2)?;
        if points.len() < d + 1 {
            return Err(NestError::DegenerateGeometry(format!(
                "{} points cannot span {d} dimensions",
                points.len()
            )));
        }
        let (mut e, k) = Self::fit_tight(points)?;
        let mut factor: f64 = 0.0;
        for _ in 0..bootstrap_rounds {
            let (sel, out) = bootstrap_split(points.len(), rng);
            if out.is_empty() {
                continue;
            }
            let selected: Vec<&[f64]> = sel.iter().map(|&i| points[i]).collect();
            let (c, cov) = covariance(&selected);
            let Ok(m) = Metric::from_covariance(&cov, d) else {
                continue;
            };
            for &i in &out {
                factor = factor.max(m.distance_sq(points[i], &c));
            }
        }
        e.enlargement = (factor / k).max(1.0);
        Ok(e)
    }

    pub fn dimension(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, p: &[f64]) -> Result<bool> {
        if p.len() != self.dimension() {
            return Err(NestError::invalid("dimension mismatch"));
        }
        Ok(self.metric.distance_sq(p, &self.center) <= self.enlargement)
    }

    pub fn log_volume(&self) -> f64 {
        let d = self.dimension() as f64;
        log_unit_ball_volume(self.dimension())
            + 0.5 * self.metric.log_det()
            + 0.5 * d * self.enlargement.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let s = self.enlargement.sqrt();
        let y: Vec<f64> = random_in_ball(self.dimension(), rng)
            .into_iter()
            .map(|v| v * s)
            .collect();
        self.metric
            .colour(&y)
            .iter()
            .zip(&self.center)
            .map(|(a, c)| a + c)
            .collect()
    }
}

/// Union of balls of radius sqrt(radius_sq) around each anchor, in the space
/// whitened by `metric`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLFriends {
    pub metric: Metric,
    /// Anchors in whitened coordinates.
    pub anchors: Vec<Vec<f64>>,
    pub radius_sq: f64,
    pub cluster_labels: Vec<usize>,
}

fn nearest_sq(a: &[f64], set: &[Vec<f64>], idx: &[usize]) -> f64 {
    idx.iter()
        .map(|&j| sq_dist(a, &set[j]))
        .fold(f64::INFINITY, f64::min)
}

/// Largest left-out nearest-neighbour distance over bootstrap rounds.
fn bootstrap_radius<R: Rng + ?Sized>(w: &[Vec<f64>], rounds: usize, rng: &mut R) -> f64 {
    let n = w.len();
    let all: Vec<usize> = (0..n).collect();
    if rounds == 0 {
        return (0..n)
            .map(|i| {
                let others: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
                nearest_sq(&w[i], w, &others)
            })
            .fold(0.0, f64::max);
    }
    let mut r: f64 = 0.0;
    for _ in 0..rounds {
        let (sel, out) = bootstrap_split(n, rng);
        let mut uniq = sel;
        uniq.sort_unstable();
        uniq.dedup();
        for &i in &out {
            r = r.max(nearest_sq(&w[i], w, &uniq));
        }
    }
    r
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the "within radius" graph, labelled by first
/// occurrence.
fn cluster(w: &[Vec<f64>], radius_sq: f64) -> Vec<usize> {
    let n = w.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if sq_dist(&w[i], &w[j]) <= radius_sq {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut map = std::collections::HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let next = map.len();
        labels[i] = *map.entry(root).or_insert(next);
    }
    labels
}

fn metric_from_clusters(points: &[&[f64]], labels: &[usize]) -> Result<Metric> {
    let d = points[0].len();
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (m, x) in means[l].iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *c as f64);
    }
    let rows: Vec<Vec<f64>> = points
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.iter().zip(&means[l]).map(|(a, b)| a - b).collect())
        .collect();
    let cov = crate::linalg::covariance_centred(&rows);
    Metric::from_covariance(&cov, d)
}

impl MLFriends {
    pub fn fit<R: Rng + ?Sized>(
        points: &[&[f64]],
        bootstrap_rounds: usize,
        rng: &mut R,
    ) -> Result<MLFriends> {
        check_points(points, 2)?;
        let mut labels = vec![0usize; points.len()];
        let mut metric = metric_from_clusters(points, &labels)?;
        let mut region = None;
        for _ in 0..MAX_CLUSTER_ITERATIONS {
            let w: Vec<Vec<f64>> = points.iter().map(|p| metric.whiten(p)).collect();
            let r = bootstrap_radius(&w, bootstrap_rounds, rng);
            let new_labels = cluster(&w, r);
            let stable = new_labels == labels;
            region = Some(MLFriends {
                metric: metric.clone(),
                anchors: w,
                radius_sq: r,
                cluster_labels: new_labels.clone(),
            });
            if stable {
                break;
            }
            labels = new_labels;
            // Singleton clusters carry no shape information; keep the old
            // metric if the subtraction leaves nothing to fit.
            match metric_from_clusters(points, &labels) {
                Ok(m) => metric = m,
                Err(_) => break,
            }
        }
        let region = region.expect("at least one iteration");
        if !(region.radius_sq > 0.0) {
            return Err(NestError::DegenerateGeometry(
                "bootstrapped radius is zero".into(),
            ));
        }
        Ok(region)
    }

    pub fn dimension(&self) -> usize {
        self.metric.dim
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn contains(&self, p: &[f64]) -> Result<bool> {
        if p.len() != self.dimension() {
            return Err(NestError::invalid("dimension mismatch"));
        }
        let w = self.metric.whiten(p);
        Ok(self
            .anchors
            .iter()
            .any(|a| sq_dist(&w, a) <= self.radius_sq))
    }

    fn multiplicity(&self, w: &[f64]) -> usize {
        self.anchors
            .iter()
            .filter(|a| sq_dist(w, a) <= self.radius_sq)
            .count()
    }

    /// Upper bound: sum of the individual ellipsoid volumes.
    pub fn log_volume_bound(&self) -> f64 {
        let d = self.dimension() as f64;
        (self.anchors.len() as f64).ln()
            + log_unit_ball_volume(self.dimension())
            + 0.5 * d * self.radius_sq.ln()
            + 0.5 * self.metric.log_det()
    }

    /// A uniform draw from the union, or None if this attempt was rejected
    /// by the multiplicity correction.
    pub fn try_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        let a = self.anchors.choose(rng).expect("anchors");
        let r = self.radius_sq.sqrt();
        let w: Vec<f64> = random_in_ball(self.dimension(), rng)
            .iter()
            .zip(a)
            .map(|(b, c)| c + r * b)
            .collect();
        let m = self.multiplicity(&w);
        if m > 1 && rng.random::<f64>() * m as f64 >= 1.0 {
            return None;
        }
        Some(self.metric.colour(&w))
    }
}

/// Either region kind behind one interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Ellipsoid(Ellipsoid),
    MLFriends(MLFriends),
}

impl Region {
    pub fn contains(&self, p: &[f64]) -> Result<bool> {
        match self {
            Region::Ellipsoid(e) => e.contains(p),
            Region::MLFriends(m) => m.contains(p),
        }
    }

    pub fn log_volume_bound(&self) -> f64 {
        match self {
            Region::Ellipsoid(e) => e.log_volume(),
            Region::MLFriends(m) => m.log_volume_bound(),
        }
    }

    pub fn try_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        match self {
            Region::Ellipsoid(e) => Some(e.sample(rng)),
            Region::MLFriends(m) => m.try_sample(rng),
        }
    }
}
