//! Python bindings for the `dhipf` filtering library.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dhipf::experiments::{self, ExperimentSpec};
use dhipf::model::Lorenz63;
use dhipf::particles::resample_indices as resample_indices_impl;
use dhipf::{
    FilterConfig, FilterKind, NoiseScaling, ObservationSeries, ResamplingScheme, StateSpaceModel, StepStreams,
    Trajectory, WeightMode,
};

fn err(e: dhipf::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn noise_scaling(name: &str) -> PyResult<NoiseScaling> {
    match name {
        "sqrt_dt" => Ok(NoiseScaling::SqrtDt),
        "per_step" => Ok(NoiseScaling::PerStep),
        other => Err(PyValueError::new_err(format!("unknown noise scaling `{other}`"))),
    }
}

fn scheme(name: &str) -> PyResult<ResamplingScheme> {
    match name {
        "inverse_cdf" | "multinomial" => Ok(ResamplingScheme::InverseCdf),
        "systematic" => Ok(ResamplingScheme::Systematic),
        other => Err(PyValueError::new_err(format!("unknown resampling scheme `{other}`"))),
    }
}

/// A discretized state-space model `x' = x + f(x) dt + noise`, `y = g(x) + R v`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: StateSpaceModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (alpha, sigma, r, dt = 0.01, noise_scaling = "sqrt_dt"))]
    fn double_well(alpha: f64, sigma: f64, r: f64, dt: f64, noise_scaling: &str) -> PyResult<Self> {
        let scaling = self::noise_scaling(noise_scaling)?;
        let inner = StateSpaceModel::double_well(alpha, sigma, r, dt, scaling).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (sigma = 1.0, r = 1.0, dt = 0.01, a1 = 10.0, a2 = 28.0, a3 = 8.0 / 3.0, noise_scaling = "sqrt_dt"))]
    fn lorenz63(sigma: f64, r: f64, dt: f64, a1: f64, a2: f64, a3: f64, noise_scaling: &str) -> PyResult<Self> {
        let scaling = self::noise_scaling(noise_scaling)?;
        let inner = StateSpaceModel::lorenz63(Lorenz63 { a1, a2, a3 }, sigma, r, dt, scaling).map_err(err)?;
        Ok(Self { inner })
    }

    /// Scalar `x' = a x + sigma w`, `y = x + r v`.
    #[staticmethod]
    fn linear_gaussian(a: f64, sigma: f64, r: f64) -> PyResult<Self> {
        Ok(Self { inner: StateSpaceModel::linear_gaussian(a, sigma, r).map_err(err)? })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// One deterministic step from `x`.
    fn predict_mean(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.state_dim() {
            return Err(err(dhipf::Error::DimensionMismatch { expected: self.inner.state_dim(), got: x.len() }));
        }
        Ok(self.inner.predict_mean(&x))
    }

    fn __repr__(&self) -> String {
        format!("Model(state_dim={}, obs_dim={}, dt={})", self.inner.state_dim(), self.inner.obs_dim(), self.inner.dt())
    }
}

/// Observations every `gap` steps: `entries` holds `(step, y)` pairs.
#[pyclass(name = "Observations", frozen)]
struct PyObservations {
    inner: ObservationSeries,
}

#[pymethods]
impl PyObservations {
    #[new]
    fn new(gap: usize, entries: Vec<(usize, Vec<f64>)>) -> PyResult<Self> {
        if gap == 0 {
            return Err(PyValueError::new_err("gap must be at least 1"));
        }
        for (k, (step, _)) in entries.iter().enumerate() {
            if *step != (k + 1) * gap {
                return Err(PyValueError::new_err(format!("entry {k} is at step {step}, expected {}", (k + 1) * gap)));
            }
        }
        Ok(Self { inner: ObservationSeries { gap, entries } })
    }

    #[getter]
    fn gap(&self) -> usize {
        self.inner.gap
    }

    #[getter]
    fn entries(&self) -> Vec<(usize, Vec<f64>)> {
        self.inner.entries.clone()
    }

    fn at(&self, step: usize) -> Option<Vec<f64>> {
        self.inner.at(step).map(<[f64]>::to_vec)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Simulates the truth; returns `(states, observations)` with `states[0] == x0`.
#[pyfunction]
#[pyo3(signature = (model, x0, n_steps, gap = 1, seed = 0, switch_at = None))]
fn simulate_truth(
    model: &PyModel,
    x0: Vec<f64>,
    n_steps: usize,
    gap: usize,
    seed: u64,
    switch_at: Option<usize>,
) -> PyResult<(Vec<Vec<f64>>, PyObservations)> {
    let (truth, obs) = dhipf::simulate_truth(&model.inner, &x0, n_steps, gap, seed, switch_at).map_err(err)?;
    Ok((truth.states, PyObservations { inner: obs }))
}

#[pyfunction]
fn normalize_weights(log_weights: Vec<f64>) -> PyResult<Vec<f64>> {
    dhipf::normalize_weights(&log_weights).map_err(err)
}

#[pyfunction]
fn effective_sample_size(weights: Vec<f64>) -> f64 {
    dhipf::effective_sample_size(&weights)
}

/// Ancestor indices for `n` draws (default `len(weights)`) from normalized weights.
#[pyfunction]
#[pyo3(signature = (weights, seed, n = None, scheme = "inverse_cdf"))]
fn resample_indices(weights: Vec<f64>, seed: u64, n: Option<usize>, scheme: &str) -> PyResult<Vec<usize>> {
    let scheme = self::scheme(scheme)?;
    let mut rng = StepStreams::from_key(seed).resample();
    resample_indices_impl(&weights, n.unwrap_or(weights.len()), scheme, &mut rng).map_err(err)
}

/// Lower Cholesky factor of a symmetric positive definite matrix given as rows.
#[pyfunction]
fn cholesky(matrix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let n = matrix.len();
    if matrix.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let flat: Vec<f64> = matrix.into_iter().flatten().collect();
    let factor = dhipf::cholesky(&flat, n).map_err(err)?;
    Ok(factor.lower().chunks(n.max(1)).map(<[f64]>::to_vec).collect())
}

/// Mean squared error between two trajectories of equal length.
#[pyfunction]
fn mse(estimates: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    if estimates.len() != truth.len() {
        return Err(err(dhipf::Error::DimensionMismatch { expected: truth.len(), got: estimates.len() }));
    }
    experiments::mse(&Trajectory::new(estimates), &Trajectory::new(truth)).map_err(err)
}

#[pyclass(name = "FilterResult", frozen, get_all)]
struct PyFilterResult {
    /// Estimates for steps `0..=n_steps`.
    estimates: Vec<Vec<f64>>,
    final_particles: Vec<Vec<f64>>,
    max_residual_ratio: f64,
    mean_iterations: Vec<f64>,
    acceptance_rate: Option<f64>,
}

/// Runs one filter from a point mass at `x0`.
#[pyfunction]
#[pyo3(signature = (
    model, kind, x0, observations, n_steps, *,
    particles = 20, enkf_ensemble = 200, levels = None, seed = 0, weight_mode = "jacobian"
))]
#[allow(clippy::too_many_arguments)]
fn run_filter(
    py: Python<'_>,
    model: &PyModel,
    kind: &str,
    x0: Vec<f64>,
    observations: &PyObservations,
    n_steps: usize,
    particles: usize,
    enkf_ensemble: usize,
    levels: Option<usize>,
    seed: u64,
    weight_mode: &str,
) -> PyResult<PyFilterResult> {
    let kind: FilterKind = kind.parse().map_err(err)?;
    let mut cfg = FilterConfig::new(kind).with_particles(particles).with_seed(seed);
    cfg.enkf_ensemble = enkf_ensemble;
    if let Some(l) = levels {
        if !kind.uses_homotopy() {
            return Err(PyValueError::new_err(format!("levels only applies to dhpf and dhipf, not {kind}")));
        }
        cfg = cfg.with_levels(l);
    }
    cfg.sampler.weight_mode = match weight_mode {
        "jacobian" => WeightMode::Jacobian,
        "paper" => WeightMode::PaperLiteral,
        other => return Err(PyValueError::new_err(format!("unknown weight mode `{other}`"))),
    };
    let run = py
        .detach(|| dhipf::run_filter(&model.inner, &cfg, &x0, &observations.inner, n_steps))
        .map_err(err)?;
    Ok(PyFilterResult {
        estimates: run.estimates.states,
        final_particles: run.final_ensemble.particles,
        max_residual_ratio: run.diagnostics.max_residual_ratio,
        mean_iterations: run.diagnostics.mean_iterations(),
        acceptance_rate: run.diagnostics.acceptance_rate(),
    })
}

#[pyclass(name = "ReportRow", frozen, get_all)]
struct PyReportRow {
    experiment: String,
    filter: String,
    repeats: usize,
    failed: usize,
    mse_mean: f64,
    mse_median: f64,
    mse_min: f64,
    mse_max: f64,
    wall_clock_mean_s: f64,
}

#[pymethods]
impl PyReportRow {
    fn __repr__(&self) -> String {
        format!(
            "ReportRow(experiment={:?}, filter={:?}, mse_median={:.4e}, failed={})",
            self.experiment, self.filter, self.mse_median, self.failed
        )
    }
}

/// Runs a built-in experiment by name (`case1`, ..., `gap-sweep`) or one given
/// as a JSON document, and returns the summary rows. With `out`, the CSV
/// outputs are written there too.
#[pyfunction]
#[pyo3(signature = (experiment, *, repeats = None, seed = None, out = None))]
fn run_experiment(
    py: Python<'_>,
    experiment: &str,
    repeats: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Vec<PyReportRow>> {
    let mut specs: Vec<ExperimentSpec> = if experiment.trim_start().starts_with('{') {
        vec![dhipf::cli::parse_spec(experiment).map_err(err)?]
    } else {
        experiments::preset(experiment).map_err(err)?
    };
    for spec in &mut specs {
        if let Some(r) = repeats {
            spec.repeats = r;
        }
        if let Some(s) = seed {
            spec.seed = s;
        }
    }
    let results = py
        .detach(|| -> dhipf::Result<_> {
            let results = specs.iter().map(experiments::run_experiment).collect::<dhipf::Result<Vec<_>>>()?;
            if let Some(dir) = &out {
                experiments::write_outputs(dir, &results)?;
            }
            Ok(results)
        })
        .map_err(err)?;
    Ok(experiments::report(&results)
        .into_iter()
        .map(|r| PyReportRow {
            experiment: r.experiment,
            filter: r.filter,
            repeats: r.repeats,
            failed: r.failed,
            mse_mean: r.mse_mean,
            mse_median: r.mse_median,
            mse_min: r.mse_min,
            mse_max: r.mse_max,
            wall_clock_mean_s: r.wall_clock_mean_s,
        })
        .collect())
}

#[pymodule]
fn dhipf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyObservations>()?;
    m.add_class::<PyFilterResult>()?;
    m.add_class::<PyReportRow>()?;
    m.add_function(wrap_pyfunction!(simulate_truth, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(resample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(cholesky, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(run_filter, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("FILTERS", FilterKind::ALL.map(FilterKind::name).to_vec())?;
    Ok(())
}
