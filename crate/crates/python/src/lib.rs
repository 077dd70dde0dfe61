//! Python bindings. Structured results (selection reports, experiment
//! reports) cross the boundary as plain dicts built from their JSON form.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use nc_core::dataselect::{select_training_distribution, MixtureGrid, MixtureTrajectories};
use nc_core::harness::{presets, run_scenario};
use nc_core::io::{NcadContainer, NcadTensor, ResolvedRun};
use nc_core::{
    aggregated_moments_fast, build_trajectory, select_two_sided, select_unweighted, select_weighted,
    ActivationMatrix, Aggregation, Domain, HyperparameterGrid, Moment, MomentVector,
};

fn err(e: nc_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(layer: &str, domain: Domain, rows: &[Vec<f64>]) -> PyResult<ActivationMatrix> {
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("ragged activation rows"));
    }
    Ok(ActivationMatrix::from_rows(layer, domain, rows))
}

fn parse_domain(tag: &str) -> PyResult<Domain> {
    Domain::parse(tag).map_err(err)
}

fn parse_moment(k: usize) -> PyResult<Moment> {
    Moment::ALL
        .get(k)
        .copied()
        .ok_or_else(|| PyValueError::new_err(format!("moment index {k} outside 0..4")))
}

fn parse_agg(agg: &str) -> PyResult<Aggregation> {
    match agg {
        "mean" => Ok(Aggregation::Mean),
        "positive-fraction" => Ok(Aggregation::PositiveFraction),
        other => Err(PyValueError::new_err(format!("unknown aggregation `{other}`"))),
    }
}

/// The four aggregated moments of an `N x D` activation matrix.
#[pyfunction]
fn aggregated_moments(rows: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64, f64)> {
    let m = aggregated_moments_fast(&matrix("layer", Domain::Target, &rows)?).map_err(err)?;
    Ok((m.m1, m.m2, m.m3, m.m4))
}

#[pyclass(name = "Trajectory", module = "nc_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: nc_core::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    /// `batches[i][l]` is layer `l`'s activation matrix (list of rows) at
    /// grid point `i`.
    #[new]
    #[pyo3(signature = (domain, omegas, layers, batches, grid_name = "step"))]
    fn new(domain: &str, omegas: Vec<f64>, layers: Vec<String>, batches: Vec<Vec<Vec<Vec<f64>>>>, grid_name: &str) -> PyResult<Self> {
        let domain = parse_domain(domain)?;
        let points = batches
            .iter()
            .map(|point| {
                if point.len() != layers.len() {
                    return Err(PyValueError::new_err("every grid point needs one matrix per layer"));
                }
                layers
                    .iter()
                    .zip(point)
                    .map(|(l, rows)| matrix(l, domain.clone(), rows))
                    .collect::<PyResult<Vec<_>>>()
            })
            .collect::<PyResult<Vec<_>>>()?;
        let grid = HyperparameterGrid::new(grid_name, omegas).map_err(err)?;
        Ok(Self { inner: build_trajectory(&points, grid).map_err(err)? })
    }

    /// From a precomputed `(tau+1) x L x 4` moment table.
    #[staticmethod]
    #[pyo3(signature = (domain, omegas, layers, table, grid_name = "step"))]
    fn from_table(domain: &str, omegas: Vec<f64>, layers: Vec<String>, table: Vec<Vec<[f64; 4]>>, grid_name: &str) -> PyResult<Self> {
        let rows = table
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|[m1, m2, m3, m4]| MomentVector { m1, m2, m3, m4, single_feature: false })
                    .collect()
            })
            .collect();
        let grid = HyperparameterGrid::new(grid_name, omegas).map_err(err)?;
        let inner = nc_core::Trajectory::from_table(parse_domain(domain)?, grid, layers, rows).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tau(&self) -> usize {
        self.inner.tau()
    }

    #[getter]
    fn layers(&self) -> Vec<String> {
        self.inner.layers().to_vec()
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain().tag()
    }

    #[getter]
    fn omegas(&self) -> Vec<f64> {
        self.inner.grid().values().to_vec()
    }

    /// Moment `k` (0-based) of layer `layer` across the grid.
    fn series(&self, layer: usize, k: usize) -> PyResult<Vec<f64>> {
        if layer >= self.inner.n_layers() {
            return Err(PyValueError::new_err(format!("layer {layer} out of range")));
        }
        Ok(self.inner.series(layer, parse_moment(k)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory(domain={}, layers={}, points={})",
            self.inner.domain(),
            self.inner.n_layers(),
            self.inner.tau() + 1
        )
    }
}

/// Checkpoint selection; returns the selection report as a dict.
#[pyfunction]
#[pyo3(signature = (source, target, mode = "weighted", valid_index = None, agg = "mean"))]
fn select_checkpoint(
    py: Python<'_>,
    source: &PyTrajectory,
    target: &PyTrajectory,
    mode: &str,
    valid_index: Option<usize>,
    agg: &str,
) -> PyResult<Py<PyAny>> {
    let (s, t) = (&source.inner, &target.inner);
    let r = match mode {
        "weighted" => select_weighted(s, t),
        "unweighted" => select_unweighted(s, t),
        "two-sided" => {
            let k = valid_index.ok_or_else(|| PyValueError::new_err("two-sided mode needs valid_index"))?;
            select_two_sided(s, t, k, parse_agg(agg)?)
        }
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    }
    .map_err(err)?;
    to_py(py, &r)
}

/// Pre-training data selection between candidates A and B.
#[pyfunction]
#[pyo3(signature = (a, b, target, name_a = "A", name_b = "B", agg = "mean"))]
fn select_data(
    py: Python<'_>,
    a: &PyTrajectory,
    b: &PyTrajectory,
    target: &PyTrajectory,
    name_a: &str,
    name_b: &str,
    agg: &str,
) -> PyResult<Py<PyAny>> {
    let grid = MixtureGrid::from_trajectories(
        name_a,
        name_b,
        MixtureTrajectories { a: a.inner.clone(), b: b.inner.clone(), target: target.inner.clone() },
    )
    .map_err(err)?;
    to_py(py, &select_training_distribution(&grid, parse_agg(agg)?).map_err(err)?)
}

/// Resolves a run manifest into one trajectory per domain tag.
#[pyfunction]
fn load_run(path: &str) -> PyResult<Vec<(String, PyTrajectory)>> {
    let run = ResolvedRun::load(path).map_err(err)?;
    run.domains()
        .map_err(err)?
        .into_iter()
        .map(|d| Ok((d.tag(), PyTrajectory { inner: run.trajectory(&d).map_err(err)? })))
        .collect()
}

/// `(name, dims, flat values)`.
type TensorTuple = (String, Vec<u64>, Vec<f32>);

/// Tensors of an NCAD container.
#[pyfunction]
fn read_ncad(path: &str) -> PyResult<Vec<TensorTuple>> {
    let c = NcadContainer::read(path).map_err(err)?;
    Ok(c.tensors.into_iter().map(|t| (t.name, t.dims, t.data)).collect())
}

#[pyfunction]
fn write_ncad(path: &str, tensors: Vec<TensorTuple>) -> PyResult<()> {
    let c = NcadContainer::new(tensors.into_iter().map(|(n, d, v)| NcadTensor::new(n, d, v)).collect());
    c.write(path).map_err(err)
}

/// Synthetic Scenario A (`"a"`) or B (`"b"`) benchmark report as a dict.
#[pyfunction]
#[pyo3(signature = (scenario = "a", n_probe = 5, trials = 20, seed = 0))]
fn synth_bench(py: Python<'_>, scenario: &str, n_probe: usize, trials: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = match scenario {
        "a" => presets::scenario_a(),
        "b" => presets::scenario_b(),
        other => return Err(PyValueError::new_err(format!("unknown scenario `{other}`"))),
    };
    let rep = py.detach(|| run_scenario(&cfg, n_probe, trials, seed)).map_err(err)?;
    to_py(py, &rep)
}

#[pymodule]
pub fn nc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(aggregated_moments, m)?)?;
    m.add_function(wrap_pyfunction!(select_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(select_data, m)?)?;
    m.add_function(wrap_pyfunction!(load_run, m)?)?;
    m.add_function(wrap_pyfunction!(read_ncad, m)?)?;
    m.add_function(wrap_pyfunction!(write_ncad, m)?)?;
    m.add_function(wrap_pyfunction!(synth_bench, m)?)?;
    Ok(())
}
