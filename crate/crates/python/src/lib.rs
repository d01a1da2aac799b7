//! Python bindings: `import pptail`.

use std::collections::BTreeMap;

use pptail::bounds::classify;
use pptail::distribution::{
    exact_distribution_bpa, exact_distribution_head, exact_distribution_pda, simulate, Outcome,
    DEFAULT_STEP_CAP,
};
use pptail::moments::{expectations, moment_matrix};
use pptail::termination::{termination_probs, DEFAULT_TOL};
use pptail::transform::to_bpa;
use pptail::{parse_model, serialize, Configuration, Pda, Triple};
use pptail_cli::{analyze, key, report_json, resolve_start, CliError};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_error(e: CliError) -> PyErr {
    match e.exit_code() {
        1 => PyOSError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => value_error(e),
    }
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A probabilistic pushdown automaton or stateless model.
#[pyclass(name = "Model", module = "pptail", frozen)]
struct PyModel {
    inner: Pda,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_model(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        pptail_cli::load(path.as_ref())
            .map(|inner| Self { inner })
            .map_err(cli_error)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().keyword()
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.inner.states().to_vec()
    }

    #[getter]
    fn alphabet(&self) -> Vec<String> {
        self.inner.alphabet().to_vec()
    }

    #[getter]
    fn num_rules(&self) -> usize {
        self.inner.rules().len()
    }

    fn __str__(&self) -> String {
        serialize(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kind={:?}, states={}, symbols={}, rules={})",
            self.kind(),
            self.inner.num_states(),
            self.inner.num_symbols(),
            self.inner.rules().len()
        )
    }

    /// Probabilities `[pXq]` and `[pX↑]`, keyed `p.X.q` and `p.X.up` (`X`, `X.up` when stateless).
    #[pyo3(signature = (tol = DEFAULT_TOL))]
    fn termination_probabilities(&self, tol: f64) -> PyResult<BTreeMap<String, f64>> {
        let table = termination_probs(&self.inner, tol)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(table
            .iter()
            .map(|(t, v)| (key(&self.inner, &t), v))
            .collect())
    }

    /// The equivalent stateless model over triple symbols.
    fn transform(&self) -> PyResult<Self> {
        let table = termination_probs(&self.inner, DEFAULT_TOL)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let res = to_bpa(&self.inner, &table).map_err(value_error)?;
        Ok(Self { inner: res.bpa })
    }

    /// `E[T_X]` per symbol of a stateless model; `inf` when infinite.
    fn expectations(&self) -> PyResult<BTreeMap<String, f64>> {
        if !self.inner.kind().is_stateless() {
            return Err(value_error(
                "expected a stateless model; call transform() first",
            ));
        }
        let exp = expectations(&self.inner, &moment_matrix(&self.inner));
        Ok(self
            .inner
            .symbol_ids()
            .map(|x| (self.inner.symbol_name(x).to_string(), exp.get(x).as_f64()))
            .collect())
    }

    /// Tail classification of `T_X` for a stateless model, as a dict.
    fn classify<'py>(&self, py: Python<'py>, symbol: &str) -> PyResult<Bound<'py, PyAny>> {
        let x = self
            .inner
            .symbol_id(symbol)
            .ok_or_else(|| value_error(format!("unknown symbol `{symbol}`")))?;
        let report = classify(&self.inner, x).map_err(value_error)?;
        json(py, &serde_json::to_string(&report).map_err(value_error)?)
    }

    /// The full analysis report the CLI prints for `analyze`.
    #[pyo3(signature = (start = None, tol = DEFAULT_TOL))]
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        start: Option<&str>,
        tol: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let report = analyze(&self.inner, start, tol, "").map_err(cli_error)?;
        json(py, &report_json(&report))
    }

    /// Exact `P(T = n)` for `n = 0..=n_max`. With a target state the mass is
    /// restricted to runs ending there.
    #[pyo3(signature = (start = None, target = None, n_max = 100))]
    fn distribution<'py>(
        &self,
        py: Python<'py>,
        start: Option<&str>,
        target: Option<&str>,
        n_max: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = &self.inner;
        let (p, x) = resolve_start(m, start).map_err(cli_error)?;
        let table = match target {
            None => {
                if m.kind().is_stateless() {
                    exact_distribution_bpa(m, &[x], n_max)
                } else {
                    exact_distribution_head(m, p, x, n_max)
                }
            }
            Some(q) => {
                let q = m
                    .state_id(q)
                    .ok_or_else(|| value_error(format!("unknown target `{q}`")))?;
                let probs = termination_probs(m, DEFAULT_TOL)
                    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
                exact_distribution_pda(m, &probs, Triple::terminating(p, x, q), n_max)
            }
        }
        .map_err(value_error)?;
        let d = PyDict::new(py);
        d.set_item("mass", &table.mass)?;
        d.set_item("total", table.total)?;
        d.set_item("residual_mass", table.residual_mass)?;
        let tail: Vec<f64> = (0..=n_max)
            .map(|n| table.tail(n))
            .collect::<Result<_, _>>()
            .map_err(value_error)?;
        d.set_item("tail", tail)?;
        Ok(d)
    }

    /// Seeded simulation; each entry is the step count, or `None` when the
    /// run hit the cap.
    #[pyo3(signature = (samples = 10000, seed = 0, cap = DEFAULT_STEP_CAP, start = None))]
    fn simulate(
        &self,
        samples: usize,
        seed: u64,
        cap: u64,
        start: Option<&str>,
    ) -> PyResult<Vec<Option<u64>>> {
        let (p, x) = resolve_start(&self.inner, start).map_err(cli_error)?;
        let stats = simulate(
            &self.inner,
            &Configuration::new(p, vec![x]),
            samples,
            cap,
            seed,
        )
        .map_err(value_error)?;
        Ok(stats
            .outcomes
            .iter()
            .map(|o| match o {
                Outcome::Terminated { steps, .. } => Some(*steps),
                Outcome::Censored => None,
            })
            .collect())
    }
}

#[pymodule]
#[pyo3(name = "pptail")]
fn pptail_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
