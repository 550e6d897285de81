//! Built-in test likelihoods and user problems loaded from config files.

use std::f64::consts::{LN_2, PI};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::priors::{Component, PriorTransform};
use crate::special::{gauss_legendre, log_add_exp, log_unit_ball_volume, normal_cdf};

/// Prior transform plus log-likelihood.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn transform(&self, u: &[f64]) -> Vec<f64>;
    fn log_likelihood(&self, theta: &[f64]) -> f64;

    fn analytic_log_z(&self) -> Option<f64> {
        None
    }

    /// log of the prior mass with log-likelihood strictly above `logl`.
    fn log_volume_at(&self, _logl: f64) -> Option<f64> {
        None
    }

    /// Unit-cube box enclosing the contour `logL > logl`.
    fn contour_bounds(&self, _logl: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Column labels for the physical parameters.
    fn labels(&self) -> Vec<String> {
        let n = self.transform(&vec![0.5; self.dimension()]).len();
        (0..n).map(|i| format!("x{i}")).collect()
    }

    /// Evaluate at a unit-cube point.
    fn evaluate(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let theta = self.transform(u);
        let l = self.log_likelihood(&theta);
        (theta, l)
    }
}

pub type SharedProblem = Arc<dyn Problem>;

fn cube_to_box(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&x| 2.0 * x - 1.0).collect()
}

fn clip_box(center: f64, half: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    (
        vec![(center - half).max(0.0); d],
        vec![(center + half).min(1.0); d],
    )
}

/// L = 1 everywhere on the unit cube.
#[derive(Clone, Debug)]
pub struct Constant {
    pub dim: usize,
}

impl Problem for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn dimension(&self) -> usize {
        self.dim
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
    fn log_likelihood(&self, _theta: &[f64]) -> f64 {
        0.0
    }
    fn analytic_log_z(&self) -> Option<f64> {
        Some(0.0)
    }
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        Some(if logl < 0.0 { 0.0 } else { f64::NEG_INFINITY })
    }
}

/// Unnormalized isotropic Gaussian exp(-|x|^2 / 2 sigma^2) on [-1, 1]^d.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub dim: usize,
    pub sigma: f64,
}

impl Gaussian {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 || !(sigma > 0.0) {
            return Err(NestError::invalid("gaussian needs d >= 1 and sigma > 0"));
        }
        Ok(Gaussian { dim, sigma })
    }

    /// Contour radius for a log-likelihood level.
    fn radius(&self, logl: f64) -> f64 {
        if logl >= 0.0 {
            0.0
        } else {
            self.sigma * (-2.0 * logl).sqrt()
        }
    }

    /// Information gain when the box truncation is negligible.
    pub fn analytic_information(&self) -> f64 {
        let d = self.dim as f64;
        d * (2.0f64.ln() - 0.5 * (2.0 * PI * std::f64::consts::E * self.sigma * self.sigma).ln())
    }
}

impl Problem for Gaussian {
    fn name(&self) -> &str {
        "gaussian"
    }
    fn dimension(&self) -> usize {
        self.dim
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        cube_to_box(u)
    }
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.sigma * self.sigma)
    }
    fn analytic_log_z(&self) -> Option<f64> {
        let s = self.sigma;
        let one = (2.0 * PI).sqrt() * s * libm::erf(1.0 / (s * 2f64.sqrt())) / 2.0;
        Some(self.dim as f64 * one.ln())
    }
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        let r = self.radius(logl);
        if r > 1.0 {
            return None;
        }
        let d = self.dim as f64;
        Some(log_unit_ball_volume(self.dim) + d * r.ln() - d * LN_2)
    }
    fn contour_bounds(&self, logl: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some(clip_box(0.5, self.radius(logl) / 2.0, self.dim))
    }
}

/// L = 1 / max_i |theta_i - 1/2| on the unit cube.
#[derive(Clone, Debug)]
pub struct HyperRectangle {
    pub dim: usize,
}

impl Problem for HyperRectangle {
    fn name(&self) -> &str {
        "hyper-rectangle"
    }
    fn dimension(&self) -> usize {
        self.dim
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let m = theta.iter().map(|t| (t - 0.5).abs()).fold(0.0, f64::max);
        -m.ln()
    }
    fn analytic_log_z(&self) -> Option<f64> {
        if self.dim < 2 {
            return None;
        }
        let d = self.dim as f64;
        Some((2.0 * d / (d - 1.0)).ln())
    }
    /// X(L) = (2/L)^d for L >= 2.
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        Some((self.dim as f64 * (LN_2 - logl)).min(0.0))
    }
    fn contour_bounds(&self, logl: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let h = if logl.is_finite() { (-logl).exp() } else { 0.5 };
        Some(clip_box(0.5, h, self.dim))
    }
}

/// L = min(1/theta, e^100) on [0, 1]; Z = 101.
#[derive(Clone, Debug)]
pub struct HeavyTail;

impl Problem for HeavyTail {
    fn name(&self) -> &str {
        "heavy-tail"
    }
    fn dimension(&self) -> usize {
        1
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        (-theta[0].ln()).min(100.0)
    }
    fn analytic_log_z(&self) -> Option<f64> {
        Some(101f64.ln())
    }
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        Some(if logl >= 100.0 {
            f64::NEG_INFINITY
        } else {
            (-logl).min(0.0)
        })
    }
    fn contour_bounds(&self, logl: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0], vec![(-logl).exp().min(1.0)]))
    }
}

/// L = 1 on [0, 1/2), L = 2 on [1/2, 1]; Z = 1.5.
#[derive(Clone, Debug)]
pub struct StepPlateau;

impl Problem for StepPlateau {
    fn name(&self) -> &str {
        "step-plateau"
    }
    fn dimension(&self) -> usize {
        1
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        if theta[0] < 0.5 {
            0.0
        } else {
            LN_2
        }
    }
    fn analytic_log_z(&self) -> Option<f64> {
        Some(1.5f64.ln())
    }
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        Some(if logl < 0.0 {
            0.0
        } else if logl < LN_2 {
            -LN_2
        } else {
            f64::NEG_INFINITY
        })
    }
    fn contour_bounds(&self, logl: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let lo = if logl < 0.0 { 0.0 } else { 0.5 };
        Some((vec![lo], vec![1.0]))
    }
}

/// Normalized radial Gaussian shell on [-1, 1]^d.
#[derive(Clone, Debug)]
pub struct GaussianShell {
    pub dim: usize,
    pub radius: f64,
    pub width: f64,
}

impl GaussianShell {
    pub fn new(dim: usize, radius: f64, width: f64) -> Result<Self> {
        if dim == 0 || !(radius >= 0.0) || !(width > 0.0) {
            return Err(NestError::invalid(
                "gaussian shell needs d >= 1, r >= 0, w > 0",
            ));
        }
        Ok(GaussianShell { dim, radius, width })
    }

    fn log_norm(&self) -> f64 {
        -0.5 * (2.0 * PI * self.width * self.width).ln()
    }
}

impl Problem for GaussianShell {
    fn name(&self) -> &str {
        "gaussian-shell"
    }
    fn dimension(&self) -> usize {
        self.dim
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        cube_to_box(u)
    }
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z = (r - self.radius) / self.width;
        self.log_norm() - 0.5 * z * z
    }
    fn analytic_log_z(&self) -> Option<f64> {
        let (r, w) = (self.radius, self.width);
        if r + 10.0 * w > 1.0 {
            return None;
        }
        let lo = (r - 10.0 * w).max(0.0);
        let hi = r + 10.0 * w;
        let (x, wt) = gauss_legendre(64);
        let d = self.dim as i32;
        let surface = (self.dim as f64) * log_unit_ball_volume(self.dim).exp();
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&wt) {
            let rr = 0.5 * (hi - lo) * xi + 0.5 * (hi + lo);
            let z = (rr - r) / w;
            s += wi * 0.5 * (hi - lo) * rr.powi(d - 1) * (self.log_norm() - 0.5 * z * z).exp();
        }
        Some((surface * s).ln() - self.dim as f64 * LN_2)
    }
    fn log_volume_at(&self, logl: f64) -> Option<f64> {
        let q = -2.0 * (logl - self.log_norm());
        if q < 0.0 {
            return Some(f64::NEG_INFINITY);
        }
        let delta = self.width * q.sqrt();
        let outer = self.radius + delta;
        if outer > 1.0 {
            return None;
        }
        let inner = (self.radius - delta).max(0.0);
        let d = self.dim as i32;
        let v = outer.powi(d) - inner.powi(d);
        Some(log_unit_ball_volume(self.dim) + v.ln() - self.dim as f64 * LN_2)
    }
}

/// Two touching Gaussian rings at very small scale.
#[derive(Clone, Debug)]
pub struct DiamondRing {
    pub r1: f64,
    pub w1: f64,
    pub r2: f64,
    pub w2: f64,
    pub amplitude2: f64,
}

impl Default for DiamondRing {
    fn default() -> Self {
        let r1 = 1e-11;
        let w1 = 0.4 * r1;
        DiamondRing {
            r1,
            w1,
            r2: r1 / 40.0,
            w2: w1 / 40.0,
            amplitude2: 100.0,
        }
    }
}

impl DiamondRing {
    fn log_ring(d: f64, r: f64, w: f64) -> f64 {
        let z = (d - r) / w;
        -0.5 * (2.0 * PI * w).ln() - 0.5 * z * z
    }

    /// Integral of one ring term over the plane.
    pub fn ring_integral(r: f64, w: f64) -> f64 {
        let norm = (2.0 * PI * w).powf(-0.5);
        2.0 * PI
            * norm
            * (w * w * (-r * r / (2.0 * w * w)).exp()
                + r * w * (2.0 * PI).sqrt() * normal_cdf(r / w))
    }

    /// Second ring term relative to the total, log weights (ring1, ring2).
    pub fn log_ring_masses(&self) -> (f64, f64) {
        (
            Self::ring_integral(self.r1, self.w1).ln(),
            self.amplitude2.ln() + Self::ring_integral(self.r2, self.w2).ln(),
        )
    }
}

impl Problem for DiamondRing {
    fn name(&self) -> &str {
        "diamond-ring"
    }
    fn dimension(&self) -> usize {
        2
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        cube_to_box(u)
    }
    fn log_likelihood(&self, p: &[f64]) -> f64 {
        let (x, y) = (p[0], p[1]);
        let d1 = x.hypot(y);
        let d2 = (x + self.r1).hypot(y);
        log_add_exp(
            Self::log_ring(d1, self.r1, self.w1),
            self.amplitude2.ln() + Self::log_ring(d2, self.r2, self.w2),
        )
    }
    /// The rings are far inside the prior box, so the plane integral is exact.
    fn analytic_log_z(&self) -> Option<f64> {
        let (a, b) = self.log_ring_masses();
        Some(log_add_exp(a, b) - 4f64.ln())
    }
}

/// Parameters for selecting a built-in problem by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub dim: Option<usize>,
    pub sigma: Option<f64>,
    pub radius: Option<f64>,
    pub width: Option<f64>,
}

pub const BUILTIN: &[(&str, &str)] = &[
    (
        "gaussian",
        "exp(-|x|^2/2 sigma^2) on [-1,1]^d (--d, --sigma)",
    ),
    (
        "gaussian-shell",
        "normalized radial Gaussian shell on [-1,1]^d (--d, --radius, --width)",
    ),
    ("hyper-rectangle", "1/max|theta-1/2| on the unit cube (--d)"),
    ("heavy-tail", "min(1/theta, e^100) on [0,1]"),
    ("step-plateau", "1 on [0,1/2), 2 on [1/2,1]"),
    ("constant", "L=1 on the unit cube (--d)"),
    (
        "diamond-ring",
        "two touching rings of scale 1e-11 on [-1,1]^2",
    ),
];

pub fn builtin(name: &str, p: &ProblemParams) -> Result<SharedProblem> {
    let d = p.dim;
    Ok(match name {
        "gaussian" => Arc::new(Gaussian::new(d.unwrap_or(2), p.sigma.unwrap_or(0.01))?),
        "gaussian-shell" => Arc::new(GaussianShell::new(
            d.unwrap_or(2),
            p.radius.unwrap_or(0.5),
            p.width.unwrap_or(0.01),
        )?),
        "hyper-rectangle" => {
            let dim = d.unwrap_or(4);
            if dim == 0 {
                return Err(NestError::invalid("dimension must be >= 1"));
            }
            Arc::new(HyperRectangle { dim })
        }
        "heavy-tail" => Arc::new(HeavyTail),
        "step-plateau" => Arc::new(StepPlateau),
        "constant" => {
            let dim = d.unwrap_or(1);
            if dim == 0 {
                return Err(NestError::invalid("dimension must be >= 1"));
            }
            Arc::new(Constant { dim })
        }
        "diamond-ring" => Arc::new(DiamondRing::default()),
        other => {
            return Err(NestError::UnknownProblem(other.to_string()));
        }
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    problem: ConfigHeader,
    #[serde(default)]
    prior: Vec<PriorSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigHeader {
    name: String,
    command: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
enum PriorSpec {
    Uniform {
        name: String,
        low: f64,
        high: f64,
    },
    Normal {
        name: String,
        mean: f64,
        sigma: f64,
    },
    LogUniform {
        name: String,
        low: f64,
        high: f64,
    },
    GaussianCorrelated {
        names: Vec<String>,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Dirichlet {
        names: Vec<String>,
    },
}

impl PriorSpec {
    fn build(&self) -> Result<(Vec<String>, Component)> {
        Ok(match self {
            PriorSpec::Uniform { name, low, high } => {
                (vec![name.clone()], Component::uniform(*low, *high)?)
            }
            PriorSpec::Normal { name, mean, sigma } => {
                (vec![name.clone()], Component::normal(*mean, *sigma)?)
            }
            PriorSpec::LogUniform { name, low, high } => {
                (vec![name.clone()], Component::log_uniform(*low, *high)?)
            }
            PriorSpec::GaussianCorrelated { names, mean, cov } => {
                if names.len() != mean.len() {
                    return Err(NestError::invalid("names and mean differ in length"));
                }
                let flat: Vec<f64> = cov.iter().flatten().copied().collect();
                (
                    names.clone(),
                    Component::correlated_gaussian(mean.clone(), &flat)?,
                )
            }
            PriorSpec::Dirichlet { names } => (names.clone(), Component::dirichlet(names.len())?),
        })
    }
}

/// Problem defined by a config file: a prior plus an external likelihood
/// process that reads one point per line and answers one log-likelihood per
/// line.
pub struct ExternalProblem {
    name: String,
    parameter_names: Vec<String>,
    prior: PriorTransform,
    process: Mutex<ExternalProcess>,
}

struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl ExternalProblem {
    pub fn from_config_str(text: &str, base_dir: &Path) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| NestError::Parse {
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        if cfg.prior.is_empty() {
            return Err(NestError::invalid("config declares no prior"));
        }
        if cfg.problem.command.is_empty() {
            return Err(NestError::invalid("config command is empty"));
        }
        let mut names = Vec::new();
        let mut comps = Vec::new();
        for spec in &cfg.prior {
            let (n, c) = spec.build()?;
            names.extend(n);
            comps.push(c);
        }
        let prior = PriorTransform::new(comps)?;
        let mut child = Command::new(&cfg.problem.command[0])
            .args(&cfg.problem.command[1..])
            .current_dir(base_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalProblem {
            name: cfg.problem.name,
            parameter_names: names,
            prior,
            process: Mutex::new(ExternalProcess {
                child,
                stdin,
                stdout,
            }),
        })
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_config_str(&text, dir)
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.parameter_names
    }

    fn query(&self, theta: &[f64]) -> Result<f64> {
        let mut p = self
            .process
            .lock()
            .map_err(|_| NestError::InvalidState("likelihood process lock poisoned".into()))?;
        let line = theta
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(p.stdin, "{line}")?;
        p.stdin.flush()?;
        let mut answer = String::new();
        if p.stdout.read_line(&mut answer)? == 0 {
            return Err(NestError::Data(
                "likelihood process closed its output".into(),
            ));
        }
        let t = answer.trim();
        match t {
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            _ => t
                .parse::<f64>()
                .map_err(|_| NestError::Data(format!("bad log-likelihood reply {t:?}"))),
        }
    }
}

impl Problem for ExternalProblem {
    fn name(&self) -> &str {
        &self.name
    }
    fn dimension(&self) -> usize {
        self.prior.dimension_in()
    }
    fn transform(&self, u: &[f64]) -> Vec<f64> {
        self.prior.transform(u)
    }
    fn labels(&self) -> Vec<String> {
        self.parameter_names.clone()
    }
    /// Protocol failures surface as NaN, which the tree rejects with a data
    /// error naming the offending node.
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.query(theta).unwrap_or(f64::NAN)
    }
}
