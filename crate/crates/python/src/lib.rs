use std::path::PathBuf;

use ftme::dynamics::{integrate_flow, steps_for, BuiltinSystem};
use ftme::entropy::{self, EntropyResult};
use ftme::fieldio::{self, Grid2D, ScalarField2D};
use ftme::lcs::{self, AlphaPolicy, CrestKind, Direction};
use ftme::spectra;
use ftme::FtmeError;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: FtmeError) -> PyErr {
    match e {
        FtmeError::InvalidInput(_) | FtmeError::NotPositiveDefinite | FtmeError::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        FtmeError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a non-empty square matrix"));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Sorted sample times with a base time `t0`.
#[pyclass(name = "TimeSet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTimeSet(entropy::TimeSet);

#[pymethods]
impl PyTimeSet {
    #[new]
    fn new(base: f64, times: Vec<f64>) -> PyResult<Self> {
        entropy::TimeSet::new(base, times).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn two_point(t0: f64, horizon: f64) -> PyResult<Self> {
        entropy::TimeSet::two_point(t0, horizon).map(Self).map_err(to_py)
    }

    #[getter]
    fn base(&self) -> f64 {
        self.0.base()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times().to_vec()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration()
    }

    fn __repr__(&self) -> String {
        format!("TimeSet(base={}, times={:?})", self.0.base(), self.0.times())
    }
}

#[pyclass(name = "EntropyResult", frozen, get_all)]
struct PyEntropy {
    h: f64,
    alpha: f64,
    method: &'static str,
    stderr: f64,
    sample_count: u64,
    empty_intersection: bool,
}

impl From<EntropyResult> for PyEntropy {
    fn from(r: EntropyResult) -> Self {
        PyEntropy {
            h: r.h,
            alpha: r.alpha,
            method: r.method.name(),
            stderr: r.stderr,
            sample_count: r.sample_count,
            empty_intersection: r.empty_intersection,
        }
    }
}

#[pymethods]
impl PyEntropy {
    fn __repr__(&self) -> String {
        format!(
            "EntropyResult(h={}, alpha={}, method='{}', stderr={})",
            self.h, self.alpha, self.method, self.stderr
        )
    }
}

#[pyfunction]
fn ftme_1d(lambda1: f64, alpha: f64) -> PyEntropy {
    entropy::ftme_1d(lambda1, alpha).into()
}

#[pyfunction]
fn ftme_2d_exact(lambda1: f64, lambda2: f64, alpha: f64, horizon: f64) -> PyResult<PyEntropy> {
    entropy::ftme_2d_exact(lambda1, lambda2, alpha, horizon).map(Into::into).map_err(to_py)
}

#[pyfunction]
fn ftme_2d_incompressible(lambda1: f64, horizon: f64) -> PyResult<PyEntropy> {
    entropy::ftme_2d_incompressible(lambda1, horizon).map(Into::into).map_err(to_py)
}

/// `mats` is a list of `(t, Phi(t, t0))` pairs, one for every time in `times`.
#[pyfunction]
#[pyo3(signature = (mats, alpha, times, samples, seed=0))]
fn ftme_monte_carlo(
    py: Python<'_>,
    mats: Vec<(f64, Vec<Vec<f64>>)>,
    alpha: f64,
    times: &PyTimeSet,
    samples: u64,
    seed: u64,
) -> PyResult<PyEntropy> {
    let mats = mats
        .iter()
        .map(|(t, m)| Ok((*t, matrix(m)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let set = times.0.clone();
    py.detach(|| entropy::ftme_monte_carlo(&mats, alpha, &set, samples, seed))
        .map(Into::into)
        .map_err(to_py)
}

#[pyfunction]
fn pesin_bound(n: usize, horizon: f64) -> f64 {
    entropy::pesin_bound(n, horizon)
}

/// Singular values, exponents and right singular vectors (as rows).
#[pyfunction]
fn svd(m: Vec<Vec<f64>>, horizon: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let s = spectra::svd_small(&matrix(&m)?, horizon).map_err(to_py)?;
    Ok((s.singular_values, s.exponents, rows(&s.vectors.transpose())))
}

#[pyclass(name = "System", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySystem(BuiltinSystem);

#[pymethods]
impl PySystem {
    #[staticmethod]
    fn linear_saddle() -> Self {
        PySystem(BuiltinSystem::LinearSaddle)
    }

    #[staticmethod]
    #[pyo3(signature = (beta=1.0, gamma=1.0))]
    fn parabola(beta: f64, gamma: f64) -> PyResult<Self> {
        BuiltinSystem::parabola(beta, gamma).map(PySystem).map_err(to_py)
    }

    #[staticmethod]
    fn linear(a: Vec<Vec<f64>>) -> PyResult<Self> {
        BuiltinSystem::linear(matrix(&a)?).map(PySystem).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.name()
    }

    /// End state and fundamental matrix from `t0` to `t1`.
    #[pyo3(signature = (x0, t0, t1, steps_per_unit=100.0))]
    fn flow(&self, x0: Vec<f64>, t0: f64, t1: f64, steps_per_unit: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let r = integrate_flow(&self.0, &DVector::from_vec(x0), t0, t1, steps_for(t1 - t0, steps_per_unit))
            .map_err(to_py)?;
        Ok((r.x_end.iter().copied().collect(), rows(&r.phi)))
    }

    fn __repr__(&self) -> String {
        format!("System('{}')", self.0.name())
    }
}

#[pyclass(name = "Grid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid(Grid2D);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> PyResult<Self> {
        Grid2D::new(x_min, x_max, y_min, y_max, nx, ny).map(PyGrid).map_err(to_py)
    }

    /// Parses `xmin:xmax:ymin:ymax:NXxNY`.
    #[staticmethod]
    fn parse(s: &str) -> PyResult<Self> {
        s.parse().map(PyGrid).map_err(to_py)
    }

    #[getter]
    fn nx(&self) -> usize {
        self.0.nx
    }

    #[getter]
    fn ny(&self) -> usize {
        self.0.ny
    }

    fn node(&self, i: usize, j: usize) -> (f64, f64) {
        self.0.node(i, j)
    }

    fn __repr__(&self) -> String {
        format!("Grid('{}')", self.0)
    }
}

/// Scalar field on a grid; `values` and `mask` are row-major with `x` fastest.
#[pyclass(name = "Field", frozen)]
struct PyField(ScalarField2D);

#[pymethods]
impl PyField {
    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.meta.kind.name()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.0.mask().to_vec()
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        self.0.value(i, j)
    }

    /// `(min, max, mean, std, valid, total)` over unmasked nodes.
    fn summary(&self) -> Option<(f64, f64, f64, f64, usize, usize)> {
        self.0.summary().map(|s| (s.min, s.max, s.mean, s.std, s.valid, s.total))
    }

    /// Ridge and trough nodes as `(i, j, x, y, kind)`.
    fn crests(&self) -> PyResult<Vec<(usize, usize, f64, f64, &'static str)>> {
        let nodes = lcs::ridges_and_troughs(&self.0).map_err(to_py)?;
        Ok(nodes
            .into_iter()
            .map(|c| {
                let kind = match c.kind {
                    CrestKind::Ridge => "ridge",
                    CrestKind::Trough => "trough",
                };
                (c.i, c.j, c.x, c.y, kind)
            })
            .collect())
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        fieldio::export_csv(&self.0, &path).map_err(to_py)
    }

    #[pyo3(signature = (path, clip=None))]
    fn to_pgm(&self, path: PathBuf, clip: Option<(f64, f64)>) -> PyResult<()> {
        fieldio::export_pgm(&self.0, &path, clip).map_err(to_py)
    }

    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        fieldio::import_csv(&path).map(PyField).map_err(to_py)
    }
}

/// FTME field with `alpha` chosen per node: `"stretching"`, `"lambda2"` or a number.
#[pyfunction]
#[pyo3(signature = (system, grid, horizon, alpha="stretching", steps_per_unit=100.0))]
fn ftme_field(
    py: Python<'_>,
    system: &PySystem,
    grid: &PyGrid,
    horizon: f64,
    alpha: &str,
    steps_per_unit: f64,
) -> PyResult<PyField> {
    let policy: AlphaPolicy = alpha.parse().map_err(to_py)?;
    let (sys, grid) = (system.0.clone(), grid.0);
    py.detach(|| lcs::ftme_field(&sys, &grid, horizon, steps_per_unit, policy))
        .map(PyField)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (system, grid, horizon, backward=false, steps_per_unit=100.0))]
fn ftle_field(
    py: Python<'_>,
    system: &PySystem,
    grid: &PyGrid,
    horizon: f64,
    backward: bool,
    steps_per_unit: f64,
) -> PyResult<PyField> {
    let dir = if backward { Direction::Backward } else { Direction::Forward };
    let (sys, grid) = (system.0.clone(), grid.0);
    py.detach(|| lcs::ftle_field(&sys, &grid, horizon, steps_per_unit, dir))
        .map(PyField)
        .map_err(to_py)
}

#[pymodule]
fn pyftme(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTimeSet>()?;
    m.add_class::<PyEntropy>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyField>()?;
    m.add_function(wrap_pyfunction!(ftme_1d, m)?)?;
    m.add_function(wrap_pyfunction!(ftme_2d_exact, m)?)?;
    m.add_function(wrap_pyfunction!(ftme_2d_incompressible, m)?)?;
    m.add_function(wrap_pyfunction!(ftme_monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(pesin_bound, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(ftme_field, m)?)?;
    m.add_function(wrap_pyfunction!(ftle_field, m)?)?;
    Ok(())
}
