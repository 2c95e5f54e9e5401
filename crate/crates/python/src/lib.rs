//! Python bindings. Vectors are lists of floats and matrices are lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use ellembed::bures::{self, DEFAULT_NS_EPS, DEFAULT_NS_ITERS};
use ellembed::mds::{fit_mds as fit_mds_impl, MdsConfig, MdsProblem};
use ellembed::optim::OptimizerKind;
use ellembed::wordvec;
use ellembed::{EllError, EllipticalPoint, EmbeddingStore, Family, MapFormula, Side};

create_exception!(ellembed_py, EllembedError, PyException);

fn err(e: EllError) -> PyErr {
    EllembedError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// An elliptical measure: mean, factor `L` and regularizer giving the scale `L·Lᵀ + εI`.
#[pyclass(name = "EllipticalPoint", module = "ellembed_py", from_py_object)]
#[derive(Clone)]
struct PyPoint {
    inner: EllipticalPoint,
}

#[pymethods]
impl PyPoint {
    #[new]
    #[pyo3(signature = (mean, factor, epsilon = 0.0, family = "gaussian"))]
    fn new(mean: Vec<f64>, factor: Vec<Vec<f64>>, epsilon: f64, family: &str) -> PyResult<Self> {
        let d = mean.len();
        let factor = if factor.is_empty() { DMatrix::zeros(d, 0) } else { to_matrix(factor)? };
        let family = match family {
            "gaussian" => Family::Gaussian,
            "uniform" => Family::Uniform,
            other => return Err(PyValueError::new_err(format!("unknown family `{other}`"))),
        };
        let inner = EllipticalPoint::new(DVector::from_vec(mean), factor, epsilon, family.tau(d)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (mean, tau = 1.0))]
    fn dirac(mean: Vec<f64>, tau: f64) -> PyResult<Self> {
        Ok(Self { inner: EllipticalPoint::dirac(DVector::from_vec(mean), tau).map_err(err)? })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn factor(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.factor)
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn scale(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.scale())
    }

    fn __repr__(&self) -> String {
        format!("EllipticalPoint(dim={}, rank={}, epsilon={}, tau={})", self.inner.dim(), self.inner.rank(), self.inner.epsilon, self.inner.tau)
    }
}

#[pyfunction]
fn w2_sq(a: &PyPoint, b: &PyPoint) -> PyResult<f64> {
    bures::w2_sq(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, iters = DEFAULT_NS_ITERS))]
fn bures_sq(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, iters: usize) -> PyResult<f64> {
    bures::bures_sq(&to_matrix(a)?, &to_matrix(b)?, iters).map_err(err)
}

/// Returns `(sqrt, inv_sqrt, residual)`.
#[pyfunction]
#[pyo3(signature = (m, iters = DEFAULT_NS_ITERS, eps = DEFAULT_NS_EPS))]
fn newton_schulz(m: Vec<Vec<f64>>, iters: usize, eps: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let r = bures::newton_schulz(&to_matrix(m)?, iters, eps).map_err(err)?;
    Ok((from_matrix(&r.y), from_matrix(&r.z), r.residual))
}

#[pyfunction]
#[pyo3(signature = (a, b, formula = "primal", iters = DEFAULT_NS_ITERS))]
fn transport_map(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, formula: &str, iters: usize) -> PyResult<Vec<Vec<f64>>> {
    let formula = match formula {
        "primal" => MapFormula::Primal,
        "alternative" => MapFormula::Alternative,
        other => return Err(PyValueError::new_err(format!("unknown formula `{other}`"))),
    };
    let t = bures::transport_map(&to_matrix(a)?, &to_matrix(b)?, formula, iters).map_err(err)?;
    Ok(from_matrix(&t.t))
}

#[pyfunction]
fn geodesic_point(a: &PyPoint, b: &PyPoint, t: f64) -> PyResult<PyPoint> {
    Ok(PyPoint { inner: bures::geodesic_point(&a.inner, &b.inner, t).map_err(err)? })
}

#[pyfunction]
fn polarization(a: &PyPoint, b: &PyPoint) -> PyResult<f64> {
    bures::polarization(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, rho = 1.0))]
fn cosine_mixture(a: &PyPoint, b: &PyPoint, rho: f64) -> PyResult<f64> {
    bures::cosine_mixture(&a.inner, &b.inner, rho).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, rho = 1.0))]
fn bures_cosine(a: &PyPoint, b: &PyPoint, rho: f64) -> PyResult<f64> {
    bures::bures_cosine(&a.inner, &b.inner, rho).map_err(err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    wordvec::spearman(&x, &y).map_err(err)
}

/// Embed an n×n dissimilarity matrix; returns `(points, stress_log)`.
#[pyfunction]
#[pyo3(signature = (d, dim = 2, iters = 1000, lr = 0.01, optimizer = "adagrad", seed = 0))]
fn fit_mds(d: Vec<Vec<f64>>, dim: usize, iters: usize, lr: f64, optimizer: &str, seed: u64) -> PyResult<(Vec<PyPoint>, Vec<f64>)> {
    let problem = MdsProblem::new(to_matrix(d)?, dim, 1.0).map_err(err)?;
    let optimizer: OptimizerKind = optimizer.parse().map_err(err)?;
    let config = MdsConfig { iters, lr, optimizer, seed, ..Default::default() };
    let fit = fit_mds_impl(&problem, &config, None).map_err(err)?;
    Ok((fit.points.into_iter().map(|inner| PyPoint { inner }).collect(), fit.stress_log))
}

/// Load a store file; returns `(token, EllipticalPoint)` pairs for the requested side.
#[pyfunction]
#[pyo3(signature = (path, side = "single"))]
fn load_store(path: &str, side: &str) -> PyResult<Vec<(String, PyPoint)>> {
    let side: Side = side.parse().map_err(err)?;
    let store = EmbeddingStore::load(path).map_err(err)?;
    let coll = store.side_or_single(side).map_err(err)?;
    Ok(coll.iter().map(|(t, p)| (t.to_string(), PyPoint { inner: p.clone() })).collect())
}

#[pymodule]
fn ellembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EllembedError", m.py().get_type::<EllembedError>())?;
    m.add_class::<PyPoint>()?;
    m.add_function(wrap_pyfunction!(w2_sq, m)?)?;
    m.add_function(wrap_pyfunction!(bures_sq, m)?)?;
    m.add_function(wrap_pyfunction!(newton_schulz, m)?)?;
    m.add_function(wrap_pyfunction!(transport_map, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_point, m)?)?;
    m.add_function(wrap_pyfunction!(polarization, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(bures_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mds, m)?)?;
    m.add_function(wrap_pyfunction!(load_store, m)?)?;
    Ok(())
}
