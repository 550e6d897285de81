//! Unit-hypercube prior transforms.

use std::fmt;
use std::sync::Arc;

use crate::error::{NestError, Result};
use crate::linalg::cholesky_regularized;
use crate::special::normal_quantile;

/// Inputs are clamped to `[U_EPS, 1 - U_EPS]` where the transform diverges
/// at the cube faces.
pub const U_EPS: f64 = 1e-15;

fn clamp_u(u: f64) -> f64 {
    u.clamp(U_EPS, 1.0 - U_EPS)
}

/// Conditional component: receives the already transformed outputs and its
/// own cube coordinate.
pub type ConditionalFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Component {
    Uniform {
        low: f64,
        high: f64,
    },
    Normal {
        mean: f64,
        sigma: f64,
    },
    LogUniform {
        low: f64,
        high: f64,
    },
    /// theta = A z + mean with cov = A A^T.
    CorrelatedGaussian {
        mean: Vec<f64>,
        chol: Vec<f64>,
    },
    Dirichlet {
        k: usize,
    },
    Conditional(ConditionalFn),
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Uniform { low, high } => write!(f, "Uniform({low}, {high})"),
            Component::Normal { mean, sigma } => write!(f, "Normal({mean}, {sigma})"),
            Component::LogUniform { low, high } => write!(f, "LogUniform({low}, {high})"),
            Component::CorrelatedGaussian { mean, .. } => {
                write!(f, "CorrelatedGaussian(dim={})", mean.len())
            }
            Component::Dirichlet { k } => write!(f, "Dirichlet({k})"),
            Component::Conditional(_) => write!(f, "Conditional"),
        }
    }
}

impl Component {
    pub fn uniform(low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(NestError::invalid(format!(
                "uniform needs low < high, got {low}, {high}"
            )));
        }
        Ok(Component::Uniform { low, high })
    }

    pub fn normal(mean: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mean.is_finite() || !sigma.is_finite() {
            return Err(NestError::invalid(format!(
                "normal needs sigma > 0, got {sigma}"
            )));
        }
        Ok(Component::Normal { mean, sigma })
    }

    pub fn log_uniform(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0 && low < high) || !high.is_finite() {
            return Err(NestError::invalid(format!(
                "log-uniform needs 0 < low < high, got {low}, {high}"
            )));
        }
        Ok(Component::LogUniform { low, high })
    }

    /// `cov` is row-major d x d and must be symmetric positive definite.
    pub fn correlated_gaussian(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(NestError::invalid("covariance shape does not match mean"));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-12 * (1.0 + cov[i * d + j].abs()) {
                    return Err(NestError::invalid("covariance is not symmetric"));
                }
            }
        }
        let chol = cholesky_regularized(cov, d)
            .map_err(|e| NestError::invalid(format!("covariance is not SPD: {e}")))?;
        Ok(Component::CorrelatedGaussian { mean, chol })
    }

    pub fn dirichlet(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(NestError::invalid("Dirichlet needs k >= 2"));
        }
        Ok(Component::Dirichlet { k })
    }

    pub fn conditional(f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Component::Conditional(Arc::new(f))
    }

    pub fn dimension(&self) -> usize {
        match self {
            Component::CorrelatedGaussian { mean, .. } => mean.len(),
            Component::Dirichlet { k } => *k,
            _ => 1,
        }
    }

    fn apply(&self, u: &[f64], out: &mut Vec<f64>) {
        match self {
            Component::Uniform { low, high } => out.push(low + (high - low) * u[0]),
            Component::Normal { mean, sigma } => {
                out.push(mean + sigma * normal_quantile(clamp_u(u[0])))
            }
            Component::LogUniform { low, high } => {
                out.push((low.ln() + (high.ln() - low.ln()) * u[0]).exp())
            }
            Component::CorrelatedGaussian { mean, chol } => {
                let d = mean.len();
                let z: Vec<f64> = u.iter().map(|&x| normal_quantile(clamp_u(x))).collect();
                for i in 0..d {
                    let s: f64 = (0..=i).map(|j| chol[i * d + j] * z[j]).sum();
                    out.push(mean[i] + s);
                }
            }
            Component::Dirichlet { .. } => {
                let g: Vec<f64> = u.iter().map(|&x| -clamp_u(x).ln()).collect();
                let total: f64 = g.iter().sum();
                out.extend(g.iter().map(|v| v / total));
            }
            Component::Conditional(f) => {
                let v = f(out, u[0]);
                out.push(v);
            }
        }
    }
}

/// A sequence of components applied left to right.
#[derive(Clone, Debug, Default)]
pub struct PriorTransform {
    components: Vec<Component>,
}

impl PriorTransform {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(NestError::invalid("prior needs at least one component"));
        }
        Ok(PriorTransform { components })
    }

    /// Component-wise inverse CDFs.
    pub fn inverse_cdf(specs: Vec<Component>) -> Result<Self> {
        Self::new(specs)
    }

    pub fn uniform_box(dim: usize, low: f64, high: f64) -> Result<Self> {
        let c = Component::uniform(low, high)?;
        Self::new(vec![c; dim])
    }

    pub fn correlated_gaussian(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        Self::new(vec![Component::correlated_gaussian(mean, cov)?])
    }

    pub fn dirichlet(k: usize) -> Result<Self> {
        Self::new(vec![Component::dirichlet(k)?])
    }

    pub fn then(mut self, c: Component) -> Self {
        self.components.push(c);
        self
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dimension_in(&self) -> usize {
        self.components.iter().map(|c| c.dimension()).sum()
    }

    pub fn dimension_out(&self) -> usize {
        self.dimension_in()
    }

    pub fn transform(&self, u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(u.len());
        let mut offset = 0;
        for c in &self.components {
            let k = c.dimension();
            c.apply(&u[offset..offset + k], &mut out);
            offset += k;
        }
        out
    }
}
