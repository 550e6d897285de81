//! Python bindings: exploration trees, integration, classic runs, priors and
//! the insertion-rank tests.

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use nestkit::agents::run_classic;
use nestkit::diagnostics::{ks_test as ks_test_core, z_of, InsertionRecord};
use nestkit::experiments::alpha_formula as alpha_formula_core;
use nestkit::integrator::{
    estimate_uncertainty as estimate_uncertainty_core, integrate, RunResult, ShrinkageEstimator,
    DEFAULT_BETA_RESAMPLES,
};
use nestkit::priors::{Component, PriorTransform};
use nestkit::problems::{builtin, ProblemParams, BUILTIN};
use nestkit::run::SamplerSpec;
use nestkit::termination::TerminationPolicy;
use nestkit::tree::Reattach;
use nestkit::{ExplorationTree, NestError};

fn to_py(e: NestError) -> PyErr {
    match e {
        NestError::Io(io) => PyIOError::new_err(io.to_string()),
        NestError::NotFound(id) => PyKeyError::new_err(format!("node {id} not found")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn estimator(name: &str, seed: u64) -> PyResult<ShrinkageEstimator> {
    match name {
        "arithmetic" => Ok(ShrinkageEstimator::Arithmetic),
        "geometric" => Ok(ShrinkageEstimator::Geometric),
        "stochastic" => Ok(ShrinkageEstimator::Stochastic { seed }),
        other => Err(PyValueError::new_err(format!(
            "unknown estimator '{other}'"
        ))),
    }
}

fn result_dict<'py>(py: Python<'py>, r: &RunResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("log_z", r.log_evidence)?;
    d.set_item("log_z_err", r.log_evidence_uncertainty)?;
    d.set_item("information_gain", r.information_gain)?;
    d.set_item("ess", r.effective_sample_size)?;
    d.set_item("iterations", r.iterations)?;
    let rows: Vec<Vec<f64>> = r
        .posterior
        .iter()
        .map(|s| {
            let mut row = vec![s.weight, s.log_likelihood];
            row.extend_from_slice(&s.point_physical);
            row
        })
        .collect();
    d.set_item("posterior", PyList::new(py, rows)?)?;
    Ok(d)
}

/// Exploration tree of sampled points.
#[pyclass(name = "Tree", module = "nestkit")]
struct PyTree {
    inner: ExplorationTree,
}

#[pymethods]
impl PyTree {
    #[new]
    fn new(dimension: usize) -> PyResult<Self> {
        Ok(PyTree {
            inner: ExplorationTree::new(dimension).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyTree {
            inner: ExplorationTree::from_bytes(data).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, self.inner.to_bytes()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn merge(trees: Vec<PyRef<'_, PyTree>>) -> PyResult<Self> {
        let owned: Vec<ExplorationTree> = trees.iter().map(|t| t.inner.clone()).collect();
        Ok(PyTree {
            inner: ExplorationTree::merge(&owned).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (parent, point_unit, log_likelihood, point_physical=None))]
    fn attach_child(
        &mut self,
        parent: usize,
        point_unit: Vec<f64>,
        log_likelihood: f64,
        point_physical: Option<Vec<f64>>,
    ) -> PyResult<usize> {
        let phys = point_physical.unwrap_or_else(|| point_unit.clone());
        self.inner
            .attach_child(parent, point_unit, phys, log_likelihood)
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn children(&self, node: usize) -> PyResult<Vec<usize>> {
        self.inner
            .get(node)
            .map(|n| n.children.clone())
            .ok_or_else(|| to_py(NestError::NotFound(node)))
    }

    fn node<'py>(&self, py: Python<'py>, id: usize) -> PyResult<Bound<'py, PyDict>> {
        let n = self
            .inner
            .get(id)
            .ok_or_else(|| to_py(NestError::NotFound(id)))?;
        let d = PyDict::new(py);
        d.set_item("id", n.id)?;
        d.set_item("parent", n.parent)?;
        d.set_item("children", n.children.clone())?;
        d.set_item("log_likelihood", n.log_likelihood)?;
        d.set_item("point_unit", n.point_unit.clone())?;
        d.set_item("point_physical", n.point_physical.clone())?;
        Ok(d)
    }

    #[pyo3(signature = (estimator="arithmetic", seed=0))]
    fn integrate<'py>(
        &self,
        py: Python<'py>,
        estimator: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let est = self::estimator(estimator, seed)?;
        let r = integrate(&self.inner, est).map_err(to_py)?;
        result_dict(py, &r)
    }

    #[pyo3(signature = (folds=None, resamples=DEFAULT_BETA_RESAMPLES, seed=1))]
    fn estimate_uncertainty(
        &self,
        py: Python<'_>,
        folds: Option<usize>,
        resamples: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let k = folds.unwrap_or_else(|| self.inner.root().children.len().min(10));
        let tree = &self.inner;
        py.detach(|| estimate_uncertainty_core(tree, k, resamples, seed, Reattach::None))
            .map_err(to_py)
    }
}

/// Run classic nested sampling on a built-in problem.
#[pyfunction]
#[pyo3(signature = (problem, nlive=400, sampler="mlfriends", steps=16, adapt=false, seed=1, eps=1e-3, dim=None, sigma=None, max_iter=None))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    problem: &str,
    nlive: usize,
    sampler: &str,
    steps: usize,
    adapt: bool,
    seed: u64,
    eps: f64,
    dim: Option<usize>,
    sigma: Option<f64>,
    max_iter: Option<usize>,
) -> PyResult<(Bound<'py, PyDict>, PyTree)> {
    let params = ProblemParams {
        dim,
        sigma,
        ..Default::default()
    };
    let p = builtin(problem, &params).map_err(to_py)?;
    let spec = SamplerSpec {
        kind: sampler.into(),
        steps,
        adapt,
        region_filter: false,
    };
    let policy = TerminationPolicy {
        epsilon_remainder: eps,
        max_iterations: max_iter,
        ..Default::default()
    };
    let out = py
        .detach(|| {
            run_classic(
                &*p,
                nlive,
                policy,
                spec.build()?,
                ShrinkageEstimator::Arithmetic,
                seed,
            )
        })
        .map_err(to_py)?;
    let d = result_dict(py, &out.result)?;
    d.set_item("likelihood_evals", out.agent.evals)?;
    d.set_item("utest_z", out.agent.utest.z_score().unwrap_or(0.0))?;
    d.set_item("analytic_log_z", p.analytic_log_z())?;
    d.set_item("live_counts", out.state.live_count_history())?;
    Ok((d, PyTree { inner: out.tree }))
}

/// Names of the built-in problems.
#[pyfunction]
fn problems() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

fn records(orders: Vec<usize>, live_counts: Vec<usize>) -> PyResult<Vec<InsertionRecord>> {
    if orders.len() != live_counts.len() {
        return Err(PyValueError::new_err(
            "orders and live_counts differ in length",
        ));
    }
    orders
        .into_iter()
        .zip(live_counts)
        .map(|(o, n)| InsertionRecord::new(o, n).map_err(to_py))
        .collect()
}

/// U-test z score of insertion orders with their live counts.
#[pyfunction]
fn utest_z(orders: Vec<usize>, live_counts: Vec<usize>) -> PyResult<f64> {
    z_of(&records(orders, live_counts)?).map_err(to_py)
}

/// Two-sided KS p-value of insertion orders at a constant live count.
#[pyfunction]
fn ks_test(orders: Vec<usize>, live_count: usize) -> PyResult<f64> {
    let n = orders.len();
    ks_test_core(&records(orders, vec![live_count; n])?).map_err(to_py)
}

#[pyfunction]
fn alpha_formula(d: usize, n: usize) -> f64 {
    alpha_formula_core(d, n)
}

/// Prior transform built from a list of component dicts, e.g.
/// `{"type": "normal", "mean": 0, "sigma": 1}`.
#[pyclass(name = "Prior", module = "nestkit")]
struct PyPrior {
    inner: PriorTransform,
}

fn get_f64(d: &Bound<'_, PyDict>, key: &str) -> PyResult<f64> {
    d.get_item(key)?
        .ok_or_else(|| PyKeyError::new_err(format!("missing '{key}'")))?
        .extract()
}

#[pymethods]
impl PyPrior {
    #[new]
    fn new(components: Vec<Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut out = Vec::new();
        for c in &components {
            let kind: String = c
                .get_item("type")?
                .ok_or_else(|| PyKeyError::new_err("missing 'type'"))?
                .extract()?;
            let comp = match kind.as_str() {
                "uniform" => Component::uniform(get_f64(c, "low")?, get_f64(c, "high")?),
                "normal" => Component::normal(get_f64(c, "mean")?, get_f64(c, "sigma")?),
                "log-uniform" => Component::log_uniform(get_f64(c, "low")?, get_f64(c, "high")?),
                "dirichlet" => {
                    let k: usize = c
                        .get_item("k")?
                        .ok_or_else(|| PyKeyError::new_err("missing 'k'"))?
                        .extract()?;
                    Component::dirichlet(k)
                }
                "gaussian-correlated" => {
                    let mean: Vec<f64> = c
                        .get_item("mean")?
                        .ok_or_else(|| PyKeyError::new_err("missing 'mean'"))?
                        .extract()?;
                    let cov: Vec<Vec<f64>> = c
                        .get_item("cov")?
                        .ok_or_else(|| PyKeyError::new_err("missing 'cov'"))?
                        .extract()?;
                    let flat: Vec<f64> = cov.into_iter().flatten().collect();
                    Component::correlated_gaussian(mean, &flat)
                }
                other => {
                    return Err(PyValueError::new_err(format!(
                        "unknown prior type '{other}'"
                    )))
                }
            }
            .map_err(to_py)?;
            out.push(comp);
        }
        Ok(PyPrior {
            inner: PriorTransform::new(out).map_err(to_py)?,
        })
    }

    #[getter]
    fn dimension_in(&self) -> usize {
        self.inner.dimension_in()
    }

    #[getter]
    fn dimension_out(&self) -> usize {
        self.inner.dimension_out()
    }

    fn transform(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        if u.len() != self.inner.dimension_in() {
            return Err(PyValueError::new_err(format!(
                "expected {} unit coordinates, got {}",
                self.inner.dimension_in(),
                u.len()
            )));
        }
        Ok(self.inner.transform(&u))
    }
}

#[pymodule]
#[pyo3(name = "nestkit")]
fn nestkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTree>()?;
    m.add_class::<PyPrior>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(problems, m)?)?;
    m.add_function(wrap_pyfunction!(utest_z, m)?)?;
    m.add_function(wrap_pyfunction!(ks_test, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_formula, m)?)?;
    Ok(())
}
