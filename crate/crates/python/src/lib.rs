//! Python bindings over `testgen_core`.
//!
//! Enum-valued arguments take the same snake_case strings as the config
//! files (`"descending"`, `"well_crafted"`, `"junit4"`).

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use testgen_core::assembly::{self, Assembler, ClasspathIndex, JunitVersion};
use testgen_core::corpus::{self, DemoPool, OracleKind, OracleVocabulary, PoolKind, ProjectLayout, StatementClass};
use testgen_core::metrics::{self, OutcomeRecord, ReportFormat, RunReport};
use testgen_core::prompting::{self, InstructionVariant, PromptBundle, PromptRenderer};
use testgen_core::query;
use testgen_core::selection::{self, Embedder, EmbeddedPool, EmbeddingVector, LocalHashEmbedder, SelectedDemos, SelectionStrategy};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| value_err(format!("unknown value {s:?}")))
}

#[pyclass(name = "Query", module = "testgen", from_py_object)]
#[derive(Clone)]
pub struct PyQuery {
    inner: query::Query,
}

#[pymethods]
impl PyQuery {
    #[new]
    #[pyo3(signature = (class_name, constructor_signature, focal_method_signature, focal_source, project = "default".to_string()))]
    fn new(class_name: String, constructor_signature: String, focal_method_signature: String, focal_source: String, project: String) -> Self {
        Self {
            inner: query::Query {
                class_name,
                constructor_signature,
                focal_method_signature,
                focal_source,
                project,
            },
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("query serializes")
    }

    #[getter]
    fn class_name(&self) -> &str {
        &self.inner.class_name
    }

    #[getter]
    fn focal_method_signature(&self) -> &str {
        &self.inner.focal_method_signature
    }

    #[getter]
    fn project(&self) -> &str {
        &self.inner.project
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn focal_method_name(&self) -> String {
        self.inner.focal_method_name()
    }

    fn __repr__(&self) -> String {
        format!("Query({:?})", self.inner.id())
    }
}

/// A prefix or oracle demonstration pool.
#[pyclass(name = "DemoPool", module = "testgen")]
pub struct PyDemoPool {
    inner: DemoPool,
}

#[pymethods]
impl PyDemoPool {
    /// Loads a pool file; `kind` is `"prefix"` or `"oracle"`.
    #[staticmethod]
    #[pyo3(signature = (path, kind, tag = ""))]
    fn load(path: PathBuf, kind: &str, tag: &str) -> PyResult<Self> {
        let kind: PoolKind = parse_enum(kind)?;
        DemoPool::load(&path, kind, tag).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    /// Entries as JSON lines, the on-disk format.
    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn test_names(&self) -> Vec<String> {
        self.inner.entries.iter().map(|d| d.test_name().to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Mines `(prefix_pool, oracle_pool)` from a project's tests.
#[pyfunction]
#[pyo3(signature = (project_root, tag, main_dir = "src/main".into(), test_dir = "src/test".into()))]
fn build_demo_pools(project_root: PathBuf, tag: &str, main_dir: PathBuf, test_dir: PathBuf) -> PyResult<(PyDemoPool, PyDemoPool)> {
    let layout = ProjectLayout { main_dir, test_dir };
    let (p, o) = corpus::build_demo_pools(&project_root, &layout, &OracleVocabulary::default(), tag).map_err(value_err)?;
    Ok((PyDemoPool { inner: p }, PyDemoPool { inner: o }))
}

/// `"prefix"`, `"assertion"` or `"expected_exception"`.
#[pyfunction]
fn classify_statement(stmt: &str) -> PyResult<&'static str> {
    Ok(match corpus::classify_statement(stmt, &OracleVocabulary::default()).map_err(value_err)? {
        StatementClass::Prefix => "prefix",
        StatementClass::Oracle(OracleKind::Assertion) => "assertion",
        StatementClass::Oracle(OracleKind::ExpectedException) => "expected_exception",
    })
}

#[pyfunction]
fn derive_test_class_name(class_name: &str) -> PyResult<Vec<String>> {
    corpus::derive_test_class_name(class_name).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (text, dim = selection::DEFAULT_EMBEDDING_DIM))]
fn embed(text: &str, dim: usize) -> PyResult<Vec<f64>> {
    LocalHashEmbedder::new(dim).embed(text).map(|v| v.values).map_err(value_err)
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    selection::cosine(&EmbeddingVector::new(u), &EmbeddingVector::new(v)).map_err(value_err)
}

/// `(index, similarity)` pairs in presentation order.
#[pyfunction]
#[pyo3(signature = (query, candidates, k, strategy = "descending", seed = 0, key = ""))]
fn select_indices(query: Vec<f64>, candidates: Vec<Vec<f64>>, k: usize, strategy: &str, seed: u64, key: &str) -> PyResult<Vec<(usize, f64)>> {
    let candidates: Vec<EmbeddingVector> = candidates.into_iter().map(EmbeddingVector::new).collect();
    selection::select_indices(&EmbeddingVector::new(query), &candidates, k, parse_enum(strategy)?, seed, key).map_err(value_err)
}

#[pyclass(name = "Selection", module = "testgen")]
pub struct PySelection {
    inner: SelectedDemos,
}

#[pymethods]
impl PySelection {
    #[getter]
    fn similarities(&self) -> Vec<f64> {
        self.inner.similarities.clone()
    }

    #[getter]
    fn test_names(&self) -> Vec<String> {
        self.inner.demos.iter().map(|d| d.test_name().to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Excludes the query's own focal method, then selects `k` demos using
/// the offline embedder.
#[pyfunction]
#[pyo3(signature = (pool, query, k = 5, strategy = "descending", seed = 0))]
fn select_demos(pool: &PyDemoPool, query: &PyQuery, k: usize, strategy: &str, seed: u64) -> PyResult<PySelection> {
    let strategy: SelectionStrategy = parse_enum(strategy)?;
    let embedder = LocalHashEmbedder::default();
    let embedded = EmbeddedPool::new(pool.inner.clone(), &embedder).map_err(value_err)?;
    let q = &query.inner;
    let qv = embedder
        .embed(&format!("{}\n{}\n{}", q.class_name, q.constructor_signature, q.focal_method_signature))
        .map_err(value_err)?;
    match embedded.select_for(q, &qv, k, strategy, seed) {
        Ok(inner) => Ok(PySelection { inner }),
        Err(selection::SelectionError::EmptyPool) => Ok(PySelection {
            inner: SelectedDemos::empty(strategy),
        }),
        Err(e) => Err(value_err(e)),
    }
}

#[pyclass(name = "Prompt", module = "testgen", from_py_object)]
#[derive(Clone)]
pub struct PyPrompt {
    inner: PromptBundle,
}

#[pymethods]
impl PyPrompt {
    #[getter]
    fn rendered(&self) -> &str {
        &self.inner.rendered
    }

    #[getter]
    fn token_count(&self) -> usize {
        self.inner.token_count
    }

    #[getter]
    fn system_text(&self) -> &str {
        self.inner.system_text()
    }

    #[getter]
    fn user_text(&self) -> String {
        self.inner.user_text()
    }

    #[getter]
    fn n_demos(&self) -> usize {
        self.inner.demos.len()
    }

    fn __str__(&self) -> &str {
        &self.inner.rendered
    }
}

#[pyfunction]
#[pyo3(signature = (query, selection = None, variant = "well_crafted"))]
fn render_prefix_prompt(query: &PyQuery, selection: Option<&PySelection>, variant: &str) -> PyResult<PyPrompt> {
    let empty = SelectedDemos::empty(SelectionStrategy::Descending);
    let demos = selection.map_or(&empty, |s| &s.inner);
    let variant: InstructionVariant = parse_enum(variant)?;
    PromptRenderer::default()
        .render_prefix_prompt(&query.inner, demos, variant)
        .map(|inner| PyPrompt { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (query, prefix, selection = None, variant = "well_crafted"))]
fn render_oracle_prompt(query: &PyQuery, prefix: &str, selection: Option<&PySelection>, variant: &str) -> PyResult<PyPrompt> {
    let empty = SelectedDemos::empty(SelectionStrategy::Descending);
    let demos = selection.map_or(&empty, |s| &s.inner);
    let variant: InstructionVariant = parse_enum(variant)?;
    PromptRenderer::default()
        .render_oracle_prompt(&query.inner, prefix, demos, variant)
        .map(|inner| PyPrompt { inner })
        .map_err(value_err)
}

#[pyfunction]
fn enforce_token_budget(prompt: &PyPrompt, budget: usize) -> PyResult<PyPrompt> {
    PromptRenderer::default()
        .enforce_token_budget(prompt.inner.clone(), budget)
        .map(|inner| PyPrompt { inner })
        .map_err(value_err)
}

#[pyfunction]
fn parse_llm_reply(raw: &str) -> PyResult<String> {
    prompting::parse_llm_reply(raw).map_err(value_err)
}

#[pyfunction]
fn substitute_placeholder(body_with_placeholder: &str, oracle: &str) -> PyResult<String> {
    assembly::substitute_placeholder(body_with_placeholder, oracle).map_err(value_err)
}

#[pyclass(name = "CandidateTest", module = "testgen", get_all)]
pub struct PyCandidateTest {
    test_class_name: String,
    test_method_name: String,
    package: Option<String>,
    imports: Vec<String>,
    source_file: String,
    revision: u32,
}

/// Builds a compilable test class from a prefix and an oracle.
#[pyfunction]
#[pyo3(signature = (prefix, oracle, query, junit = "junit4"))]
fn assemble(prefix: &str, oracle: &str, query: &PyQuery, junit: &str) -> PyResult<PyCandidateTest> {
    let junit: JunitVersion = parse_enum(junit)?;
    let index = ClasspathIndex::with_jdk_defaults();
    let c = Assembler::new(junit, &index).assemble(prefix, oracle, &query.inner).map_err(value_err)?;
    Ok(PyCandidateTest {
        test_class_name: c.test_class_name,
        test_method_name: c.test_method_name,
        package: c.package,
        imports: c.imports,
        source_file: c.source_file,
        revision: c.revision,
    })
}

fn parse_outcomes(jsonl: &str) -> PyResult<Vec<OutcomeRecord>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| value_err(format!("outcome line {}: {e}", i + 1))))
        .collect()
}

/// `(accuracy, focal_method_coverage, avg_repair_attempts)` as
/// `(numerator, denominator)` pairs over an outcomes JSONL text.
#[pyfunction]
#[pyo3(signature = (outcomes_jsonl, focal_methods = None))]
fn compute_metrics(outcomes_jsonl: &str, focal_methods: Option<Vec<String>>) -> PyResult<((u64, u64), (u64, u64), (u64, u64))> {
    let outcomes = parse_outcomes(outcomes_jsonl)?;
    let focal: BTreeSet<String> = match focal_methods {
        Some(f) => f.into_iter().collect(),
        None => outcomes.iter().map(OutcomeRecord::focal_key).collect(),
    };
    let pair = |r: num_rational::Ratio<u64>| (*r.numer(), *r.denom());
    Ok((
        pair(metrics::accuracy(&outcomes).map_err(value_err)?),
        pair(metrics::focal_method_coverage(&outcomes, &focal).map_err(value_err)?),
        pair(metrics::avg_repair_attempts(&outcomes).map_err(value_err)?),
    ))
}

/// Renders a run report (`"table"` or `"json"`) for an outcomes JSONL text.
#[pyfunction]
#[pyo3(signature = (outcomes_jsonl, format = "table"))]
fn render_report(outcomes_jsonl: &str, format: &str) -> PyResult<String> {
    let format: ReportFormat = parse_enum(format)?;
    let report = RunReport::from_records(&parse_outcomes(outcomes_jsonl)?, None).map_err(value_err)?;
    Ok(metrics::render_report(&report, format))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    testgen_core::cli::run(std::iter::once("testgen".to_string()).chain(args))
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuery>()?;
    m.add_class::<PyDemoPool>()?;
    m.add_class::<PySelection>()?;
    m.add_class::<PyPrompt>()?;
    m.add_class::<PyCandidateTest>()?;
    m.add_function(wrap_pyfunction!(build_demo_pools, m)?)?;
    m.add_function(wrap_pyfunction!(classify_statement, m)?)?;
    m.add_function(wrap_pyfunction!(derive_test_class_name, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(select_indices, m)?)?;
    m.add_function(wrap_pyfunction!(select_demos, m)?)?;
    m.add_function(wrap_pyfunction!(render_prefix_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_oracle_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(enforce_token_budget, m)?)?;
    m.add_function(wrap_pyfunction!(parse_llm_reply, m)?)?;
    m.add_function(wrap_pyfunction!(substitute_placeholder, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
fn testgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
