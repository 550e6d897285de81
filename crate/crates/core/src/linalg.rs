//! Dense helpers for the small matrices used by regions and walkers.
//!
//! Matrices are row-major `Vec<f64>` of size `d*d`; nalgebra is used only for
//! factorizations.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};

pub fn mean(points: &[&[f64]]) -> Vec<f64> {
    let d = points[0].len();
    let mut m = vec![0.0; d];
    for p in points {
        for (mi, pi) in m.iter_mut().zip(p.iter()) {
            *mi += pi;
        }
    }
    let n = points.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Sample covariance (denominator n-1) of already-centred rows.
pub fn covariance_centred(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut c = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..=i {
                c[i * d + j] += r[i] * r[j];
            }
        }
    }
    let denom = (rows.len().max(2) - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = c[i * d + j] / denom;
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    c
}

pub fn covariance(points: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let m = mean(points);
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&m).map(|(a, b)| a - b).collect())
        .collect();
    (m, covariance_centred(&rows))
}

/// Lower Cholesky factor of `cov` after adding `1e-10 * trace / d` to the
/// diagonal.
pub fn cholesky_regularized(cov: &[f64], d: usize) -> Result<Vec<f64>> {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(NestError::DegenerateGeometry(format!(
            "covariance trace is {trace}"
        )));
    }
    let jitter = 1e-10 * trace / d as f64;
    let mut m = DMatrix::from_row_slice(d, d, cov);
    for i in 0..d {
        m[(i, i)] += jitter;
    }
    let chol = m.cholesky().ok_or_else(|| {
        NestError::DegenerateGeometry("covariance is not positive definite".into())
    })?;
    let l = chol.l();
    // Reject factors whose conditioning makes the metric meaningless.
    let diag: Vec<f64> = (0..d).map(|i| l[(i, i)]).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > max * 1e-4) {
        return Err(NestError::DegenerateGeometry(format!(
            "covariance is rank deficient (Cholesky diagonal ratio {:e})",
            min / max
        )));
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            out[i * d + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// An affine metric `x -> L^{-1}(x - 0)` defined by a lower Cholesky factor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metric {
    pub dim: usize,
    /// Row-major lower triangular factor, `cov = L L^T`.
    pub chol: Vec<f64>,
}

impl Metric {
    pub fn identity(dim: usize) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = 1.0;
        }
        Metric { dim, chol }
    }

    pub fn from_covariance(cov: &[f64], dim: usize) -> Result<Self> {
        Ok(Metric {
            dim,
            chol: cholesky_regularized(cov, dim)?,
        })
    }

    /// Fit to the sample covariance of `points`.
    pub fn fit(points: &[&[f64]]) -> Result<Self> {
        let d = points[0].len();
        if points.len() < 2 {
            return Err(NestError::DegenerateGeometry(
                "need at least two points for a covariance".into(),
            ));
        }
        let (_, cov) = covariance(points);
        Metric::from_covariance(&cov, d)
    }

    /// Solve `L y = x`.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i];
            for j in 0..i {
                s -= self.chol[i * d + j] * y[j];
            }
            y[i] = s / self.chol[i * d + i];
        }
        y
    }

    /// `L y`.
    pub fn colour(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..=i).map(|j| self.chol[i * d + j] * y[j]).sum())
            .collect()
    }

    pub fn distance_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.whiten(&diff).iter().map(|v| v * v).sum()
    }

    pub fn log_det(&self) -> f64 {
        // log det(L L^T) = 2 sum log L_ii
        2.0 * (0..self.dim)
            .map(|i| self.chol[i * self.dim + i].ln())
            .sum::<f64>()
    }
}

pub fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform direction on the unit sphere.
pub fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = squared_norm(&v).sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point inside the unit ball.
pub fn random_in_ball<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let dir = random_direction(d, rng);
    let u: f64 = rng.random();
    let r = u.powf(1.0 / d as f64);
    dir.into_iter().map(|x| x * r).collect()
}
