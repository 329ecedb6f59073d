//! Python module `consult`. Structured results come back as plain dicts
//! and lists with the same shapes as the JSON outputs.

use std::path::PathBuf;
use std::sync::Arc;

use consult_core::belief::{self, StabilizerStage};
use consult_core::boundary::PunctuationAblation;
use consult_core::case::Suite;
use consult_core::config::{Baseline, RunConfig};
use consult_core::extract::{event_prf as prf, MatchCounts};
use consult_core::harness::{self, CaseOutcome};
use consult_core::planner::{self, ActionKind, Answer, CandidateAction, ObservationModel, PlannerConfig};
use consult_core::session::{Session, SessionStatus};
use consult_core::stream::Role;
use consult_core::trace::{self, TraceLog};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(err)
}

fn role(s: &str) -> PyResult<Role> {
    match s {
        "patient" => Ok(Role::Patient),
        "doctor" => Ok(Role::Doctor),
        _ => Err(PyValueError::new_err(format!("unknown role {s:?}"))),
    }
}

fn baselines(s: &str) -> PyResult<Vec<Baseline>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            let mut c = x.chars();
            match (c.next(), c.next()) {
                (Some(ch), None) => Baseline::from_letter(ch),
                _ => None,
            }
            .ok_or_else(|| PyValueError::new_err(format!("unknown baseline {x:?}")))
        })
        .collect()
}

/// Run configuration. `Config()` gives the defaults; `Config(toml)` parses
/// a TOML document where missing keys take defaults.
#[pyclass(name = "Config", frozen, from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with the baseline set by letter (A-D).
    fn with_baseline(&self, letter: &str) -> PyResult<Self> {
        let b = baselines(letter)?;
        match b.as_slice() {
            [b] => Ok(Self { inner: self.inner.with_baseline(*b) }),
            _ => Err(PyValueError::new_err("expected one baseline letter")),
        }
    }

    fn __repr__(&self) -> String {
        format!("Config(baseline={:?}, hash={:.12})", self.inner.harness.baseline, self.inner.hash())
    }
}

fn cfg_or_default(c: Option<&PyConfig>) -> RunConfig {
    c.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Cases plus shared domain data (schema, lexicon, hypotheses, corpus, qrels).
#[pyclass(name = "Suite", frozen)]
struct PySuite {
    inner: Suite,
}

#[pymethods]
impl PySuite {
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn bundled(config: Option<&PyConfig>) -> PyResult<Self> {
        Ok(Self { inner: Suite::bundled(cfg_or_default(config).retrieval).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&PyConfig>) -> PyResult<Self> {
        Ok(Self { inner: Suite::load(&path, cfg_or_default(config).retrieval).map_err(err)? })
    }

    #[getter]
    fn case_ids(&self) -> Vec<String> {
        self.inner.cases.iter().map(|c| c.case_id.clone()).collect()
    }

    #[getter]
    fn hypotheses(&self) -> Vec<String> {
        self.inner.domain.hypotheses.ids().map(String::from).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.cases.len()
    }
}

impl PySuite {
    fn case(&self, id: &str) -> PyResult<&consult_core::case::PilotCase> {
        self.inner.case(id).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }
}

/// A live session driven one turn at a time.
#[pyclass(name = "Session")]
struct PySession {
    inner: Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (suite, case_id, seed=7, config=None))]
    fn new(suite: &PySuite, case_id: &str, seed: u64, config: Option<&PyConfig>) -> PyResult<Self> {
        let spec = suite.case(case_id)?.session_spec(&suite.inner.domain).map_err(err)?;
        let inner = Session::new(Arc::clone(&suite.inner.domain), spec, cfg_or_default(config), seed)
            .map_err(err)?
            .with_auto_conclude(true);
        Ok(Self { inner })
    }

    /// Runs one typed turn and returns its update.
    #[pyo3(signature = (text, role="patient", answering=None))]
    fn push_text<'py>(
        &mut self,
        py: Python<'py>,
        text: &str,
        role: &str,
        answering: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let input = self.inner.text_input(&[(self::role(role)?, text)], answering).map_err(err)?;
        let update = self.inner.push_turn(input).map_err(err)?;
        to_py(py, &update)
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.snapshot())
    }

    /// Closes the session and returns the final report.
    fn finish<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.finish().map_err(err)?;
        to_py(py, &report)
    }

    fn trace_jsonl(&self) -> String {
        self.inner.trace().to_jsonl()
    }

    #[getter]
    fn turn(&self) -> u32 {
        self.inner.turn()
    }

    #[getter]
    fn status(&self) -> &'static str {
        match self.inner.status() {
            SessionStatus::Open => "open",
            SessionStatus::Concluded => "concluded",
            SessionStatus::Aborted => "aborted",
        }
    }
}

/// Runs one bundled case end to end.
#[pyfunction]
#[pyo3(signature = (suite, case_id, seed=7, config=None))]
fn run_case<'py>(
    py: Python<'py>,
    suite: &PySuite,
    case_id: &str,
    seed: u64,
    config: Option<&PyConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let case = suite.case(case_id)?;
    let run = harness::run_case(case, &suite.inner.domain, &cfg_or_default(config), seed).map_err(err)?;
    let report: serde_json::Value = serde_json::from_str(&run.report.to_json()).map_err(err)?;
    let out = serde_json::json!({
        "case_id": run.case_id,
        "seed": seed,
        "concluded": run.concluded,
        "turn_cap_reached": run.turn_cap_reached,
        "outcome": harness::case_outcome(case, &run),
        "updates": run.updates,
        "report": report,
        "trace_jsonl": run.trace.to_jsonl(),
    });
    to_py(py, &out)
}

/// Metrics reports for the given baselines, e.g. "A,B,C,D".
#[pyfunction]
#[pyo3(signature = (suite, baselines="A,B,C,D", config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    suite: &PySuite,
    baselines: &str,
    config: Option<&PyConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let list = self::baselines(baselines)?;
    let reports = harness::evaluate_baselines(&suite.inner, &cfg_or_default(config), &list).map_err(err)?;
    to_py(py, &reports)
}

/// Ablation rows; `kind` is "belief" or "punctuation".
#[pyfunction]
#[pyo3(signature = (suite, kind, config=None))]
fn ablate<'py>(py: Python<'py>, suite: &PySuite, kind: &str, config: Option<&PyConfig>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = cfg_or_default(config);
    match kind {
        "belief" => to_py(py, &harness::ablate_belief(&suite.inner, &cfg, &StabilizerStage::ALL).map_err(err)?),
        "punctuation" => {
            to_py(py, &harness::ablate_punctuation(&suite.inner, &cfg, &PunctuationAblation::ALL).map_err(err)?)
        }
        _ => Err(PyValueError::new_err(format!("unknown ablation {kind:?}"))),
    }
}

/// Re-executes a JSONL trace and compares it with its recorded values.
#[pyfunction]
#[pyo3(signature = (trace_jsonl, suite, config=None))]
fn replay<'py>(
    py: Python<'py>,
    trace_jsonl: &str,
    suite: &PySuite,
    config: Option<&PyConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let log = TraceLog::from_jsonl(trace_jsonl).map_err(err)?;
    let recorded = trace::recorded_summaries(&log, &suite.inner.domain.schema).map_err(err)?;
    let replayed = trace::replay(&log, &cfg_or_default(config), Arc::clone(&suite.inner.domain)).map_err(err)?;
    to_py(py, &trace::verify_replay(&recorded, &replayed.summaries))
}

#[pyfunction]
#[pyo3(name = "event_prf")]
fn py_event_prf<'py>(py: Python<'py>, tp: usize, fp: usize, fn_: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &prf(MatchCounts { tp, fp, fn_ }))
}

/// Pooled end-to-end rates from a list of outcome dicts.
#[pyfunction]
fn end_to_end_metrics<'py>(py: Python<'py>, outcomes: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let outcomes: Vec<CaseOutcome> = from_py(outcomes)?;
    to_py(py, &harness::end_to_end_metrics(&outcomes))
}

/// Shannon entropy in bits.
#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    belief::entropy(&p)
}

#[pyfunction]
fn temperature_scale(logits: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    belief::temperature_scale(&logits, t).map_err(err)
}

#[pyfunction]
fn smooth(prev: Vec<f64>, fused: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    belief::smooth(&prev, &fused, lam).map_err(err)
}

/// `likelihoods[o][h]` is P(answer o | hypothesis h).
#[pyfunction]
#[pyo3(signature = (belief, likelihoods, seed=0, eta=0.5, mc_samples=64))]
fn estimate_eig<'py>(
    py: Python<'py>,
    belief: Vec<f64>,
    likelihoods: Vec<Vec<f64>>,
    seed: u64,
    eta: f64,
    mc_samples: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let answers = likelihoods
        .into_iter()
        .enumerate()
        .map(|(i, likelihood)| Answer { id: format!("o{i}"), text: String::new(), role: Role::Patient, likelihood })
        .collect();
    let mut action = CandidateAction::new(ActionKind::Ask, "query", String::new());
    let model = ObservationModel { answers };
    model.validate("query", belief.len()).map_err(err)?;
    action.observation_model = Some(model);
    let cfg = PlannerConfig { eta, mc_samples, ..PlannerConfig::default() };
    to_py(py, &planner::estimate_eig(&action, &belief, &cfg, seed).map_err(err)?)
}

#[pymodule]
pub fn consult(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySuite>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(run_case, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(py_event_prf, m)?)?;
    m.add_function(wrap_pyfunction!(end_to_end_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_scale, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_eig, m)?)?;
    Ok(())
}
