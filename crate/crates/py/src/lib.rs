use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chunkq::chunk::ActionChunk as CoreChunk;
use chunkq::critic::{CriticConfig, CriticParams, TwinCritic};
use chunkq::env::EnvState;
use chunkq::geometry::{self, MetricWeights};
use chunkq::tabular::{self, TabularFixture as CoreFixture, DEFAULT_MAX_ITER, DEFAULT_TOL};
use chunkq::trainer::TrainState;
use chunkq::Error;

fn py_err(e: Error) -> PyErr {
    match chunkq::cli::exit_code(&e) {
        chunkq::cli::EXIT_VALIDATION => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Fixed-horizon action chunk with a validity mask.
#[pyclass(name = "ActionChunk", module = "pychunkq", from_py_object)]
#[derive(Clone)]
struct ActionChunk(CoreChunk);

#[pymethods]
impl ActionChunk {
    #[new]
    #[pyo3(signature = (actions, mask=None))]
    fn new(actions: Vec<Vec<f64>>, mask: Option<Vec<bool>>) -> PyResult<Self> {
        let c = match mask {
            Some(m) => CoreChunk::new(actions, m),
            None => CoreChunk::full(actions),
        };
        c.map(Self).map_err(py_err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    #[getter]
    fn valid_len(&self) -> usize {
        self.0.valid_len()
    }

    fn actions(&self) -> Vec<Vec<f64>> {
        self.0.actions().to_vec()
    }

    fn mask(&self) -> Vec<bool> {
        self.0.mask().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "ActionChunk(horizon={}, action_dim={}, valid_len={})",
            self.0.horizon(),
            self.0.action_dim(),
            self.0.valid_len()
        )
    }
}

/// Finite chunk-level SMDP with a fixed proposal distribution.
#[pyclass(name = "TabularFixture", module = "pychunkq", skip_from_py_object)]
#[derive(Clone)]
struct TabularFixture(CoreFixture);

#[pymethods]
impl TabularFixture {
    #[staticmethod]
    fn two_chunk() -> Self {
        Self(tabular::two_chunk_fixture())
    }

    #[staticmethod]
    fn standard() -> PyResult<Vec<Self>> {
        Ok(tabular::standard_fixtures()
            .map_err(py_err)?
            .into_iter()
            .map(Self)
            .collect())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let f: CoreFixture = serde_json::from_str(text).map_err(json_err)?;
        f.validate().map_err(py_err)?;
        Ok(Self(f))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn gamma_h(&self) -> f64 {
        self.0.smdp.gamma_h
    }

    /// Fixed point of the chunked expected-max operator.
    #[pyo3(signature = (n, tol=DEFAULT_TOL))]
    fn solve(&self, n: usize, tol: f64) -> PyResult<Vec<Vec<f64>>> {
        tabular::solve_fixed_point(&self.0.smdp, &self.0.proposal, n, tol, DEFAULT_MAX_ITER)
            .map(|s| s.q.0)
            .map_err(py_err)
    }

    /// Value of the best-of-N policy induced by the fixed point.
    #[pyo3(signature = (n, tol=DEFAULT_TOL))]
    fn induced_value(&self, n: usize, tol: f64) -> PyResult<Vec<Vec<f64>>> {
        let s = &self.0;
        let sol = tabular::solve_fixed_point(&s.smdp, &s.proposal, n, tol, DEFAULT_MAX_ITER)
            .map_err(py_err)?;
        tabular::evaluate_induced_policy(&s.smdp, &s.proposal, &sol.q, n, tol)
            .map(|q| q.0)
            .map_err(py_err)
    }

    /// Optimal value restricted to the proposal's support.
    #[pyo3(signature = (tol=DEFAULT_TOL))]
    fn support_optimal(&self, tol: f64) -> PyResult<Vec<Vec<f64>>> {
        tabular::support_optimal_q(&self.0.smdp, &self.0.proposal, tol)
            .map(|q| q.0)
            .map_err(py_err)
    }

    /// Largest observed `‖TQ1 − TQ2‖∞ / ‖Q1 − Q2‖∞` over random pairs.
    #[pyo3(signature = (n, trials=100, seed=0))]
    fn contraction_ratio(&self, n: usize, trials: usize, seed: u64) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tabular::verify_contraction(&self.0.smdp, &self.0.proposal, n, trials, &mut rng)
            .map(|r| r.max_ratio)
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularFixture(name={:?}, states={}, gamma_h={})",
            self.0.name, self.0.smdp.num_states, self.0.smdp.gamma_h
        )
    }
}

/// Twin critic pair scoring (state, chunk); scores are the twin minimum.
#[pyclass(name = "Critic", module = "pychunkq")]
struct Critic(TwinCritic);

#[pymethods]
impl Critic {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: CriticConfig = match config_json {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => CriticConfig::default(),
        };
        TwinCritic::init(config, seed).map(Self).map_err(py_err)
    }

    /// Online twins of a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        TrainState::load(path.as_ref())
            .map(|s| Self(s.online))
            .map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.0.config()).map_err(json_err)
    }

    fn num_params(&self) -> usize {
        self.0.first.len()
    }

    fn score(&self, proprio: Vec<f64>, goal: Vec<f64>, chunks: Vec<ActionChunk>) -> PyResult<Vec<f64>> {
        let state = EnvState {
            proprio,
            goal,
            step_index: 0,
        };
        let chunks: Vec<CoreChunk> = chunks.into_iter().map(|c| c.0).collect();
        self.0.min_scores(&state, &chunks).map_err(py_err)
    }

    fn checksums(&self) -> (String, String) {
        (self.0.first.checksum(), self.0.second.checksum())
    }

    /// Saves the first twin.
    fn save_first(&self, path: &str) -> PyResult<String> {
        self.0.first.save(path.as_ref()).map_err(py_err)
    }

    #[staticmethod]
    fn load_single(path: &str) -> PyResult<Vec<f64>> {
        CriticParams::load(path.as_ref())
            .map(|p| p.values().to_vec())
            .map_err(py_err)
    }
}

#[pyfunction]
fn expected_max(values: Vec<f64>, probs: Vec<f64>, n: usize) -> PyResult<f64> {
    tabular::expected_max_exact(&values, &probs, n).map_err(py_err)
}

#[pyfunction]
fn selection_distribution(values: Vec<f64>, probs: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
    tabular::selection_distribution(&values, &probs, n).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, weights=None))]
fn weighted_distance(a: &ActionChunk, b: &ActionChunk, weights: Option<Vec<f64>>) -> PyResult<f64> {
    let w = match weights {
        Some(w) => MetricWeights::new(w).map_err(py_err)?,
        None => MetricWeights::ones(a.0.action_dim()),
    };
    geometry::weighted_distance(&a.0, &b.0, &w).map_err(py_err)
}

/// `(epsilon_hat, max_q, distance_bound, scale_bound, holds)`.
#[pyfunction]
fn envelope_bound(q: Vec<f64>, d: Vec<f64>, y: f64, beta: f64) -> PyResult<(f64, f64, f64, f64, bool)> {
    let r = geometry::envelope_from_scores(&q, &d, y, beta).map_err(py_err)?;
    Ok((r.epsilon_hat, r.max_q, r.distance_bound, r.scale_bound, r.bound_holds))
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&chunkq::cli::RunConfig::default()).map_err(json_err)
}

/// Runs a command-line invocation in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    chunkq::cli::run(std::iter::once("chunkq".to_string()).chain(args))
}

#[pymodule]
fn pychunkq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", chunkq::cli::TOOL_VERSION)?;
    m.add_class::<ActionChunk>()?;
    m.add_class::<TabularFixture>()?;
    m.add_class::<Critic>()?;
    m.add_function(wrap_pyfunction!(expected_max, m)?)?;
    m.add_function(wrap_pyfunction!(selection_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_distance, m)?)?;
    m.add_function(wrap_pyfunction!(envelope_bound, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
