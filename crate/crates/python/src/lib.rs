//! Python bindings: locks and logged cells, the concurrent sets, the benchmark harness and
//! the verification suites.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::idemlock::harness::{run_workload as run, WorkloadSpec};
use ::idemlock::structures::{build, ConcurrentSet as Set, LockKind, StructureKind};
use ::idemlock::verify::suite::{self, Suite, SuiteConfig};
use ::idemlock::{Mutable, LockMode};

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// A lock whose critical sections may be completed by other threads.
#[pyclass(frozen, module = "idemlock")]
struct Lock(Arc<::idemlock::Lock>);

#[pymethods]
impl Lock {
    #[new]
    fn new() -> Self {
        Lock(Arc::new(::idemlock::Lock::new()))
    }

    fn is_locked(&self) -> bool {
        self.0.is_locked()
    }
}

/// A shared integer cell. Reads and writes made inside a critical section are logged, so
/// every run of the section sees and does the same thing.
#[pyclass(frozen, module = "idemlock")]
struct Cell(Arc<Mutable<u64>>);

#[pymethods]
impl Cell {
    #[new]
    #[pyo3(signature = (value = 0))]
    fn new(value: u64) -> Self {
        Cell(Arc::new(Mutable::new(value)))
    }

    fn load(&self) -> u64 {
        self.0.load()
    }

    fn store(&self, value: u64) {
        self.0.store(value)
    }

    /// Compare-and-modify: sets the cell to `new` if it holds `old`.
    fn cam(&self, old: u64, new: u64) {
        self.0.cam(old, new)
    }

    /// The value without logging.
    fn peek(&self) -> u64 {
        self.0.peek().1
    }
}

/// Wraps a Python callable as a critical section. An exception counts as `False`.
fn section(f: Py<PyAny>) -> impl Fn() -> bool + Send + Sync + 'static {
    move || {
        Python::attach(|py| match f.call0(py).and_then(|r| r.bind(py).is_truthy()) {
            Ok(b) => b,
            Err(e) => {
                e.print(py);
                false
            }
        })
    }
}

/// Runs `f` under `lock` if it can be taken; the callable may be run more than once, by
/// any thread, and must touch shared state only through `Cell`s.
#[pyfunction]
fn try_lock(py: Python<'_>, lock: &Lock, f: Py<PyAny>) -> bool {
    let (l, s) = (lock.0.clone(), section(f));
    py.detach(move || ::idemlock::try_lock(&l, s))
}

/// Like `try_lock`, but retries until `f` has run under the lock.
#[pyfunction]
fn strict_lock(py: Python<'_>, lock: &Lock, f: Py<PyAny>) -> bool {
    let (l, s) = (lock.0.clone(), section(f));
    py.detach(move || ::idemlock::strict_lock(&l, s))
}

/// Sets this thread's lock mode: "lockfree" or "blocking".
#[pyfunction]
fn set_lock_mode(mode: &str) -> PyResult<()> {
    ::idemlock::set_lock_mode(parse(mode)?);
    Ok(())
}

#[pyfunction]
fn lock_mode() -> &'static str {
    ::idemlock::lock_mode().name()
}

/// A concurrent ordered set of `u64` keys with `u64` values.
#[pyclass(frozen, module = "idemlock")]
struct ConcurrentSet(Box<dyn Set>);

#[pymethods]
impl ConcurrentSet {
    /// `structure` is one of "dlist", "lazylist", "leaftree", "hashtable"; `lock` is "try"
    /// or "strict".
    #[new]
    #[pyo3(signature = (structure = "leaftree", lock = "try", buckets = 1024))]
    fn new(structure: &str, lock: &str, buckets: usize) -> PyResult<Self> {
        let kind: StructureKind = parse(structure)?;
        let lock: LockKind = parse(lock)?;
        if kind == StructureKind::HashTable && !buckets.is_power_of_two() {
            return Err(PyValueError::new_err("buckets must be a power of two"));
        }
        Ok(ConcurrentSet(build(kind, lock, buckets)))
    }

    fn find(&self, py: Python<'_>, key: u64) -> PyResult<Option<u64>> {
        check(key)?;
        Ok(py.detach(|| self.0.find(key)))
    }

    fn insert(&self, py: Python<'_>, key: u64, value: u64) -> PyResult<bool> {
        check(key)?;
        Ok(py.detach(|| self.0.insert(key, value)))
    }

    fn remove(&self, py: Python<'_>, key: u64) -> PyResult<bool> {
        check(key)?;
        Ok(py.detach(|| self.0.remove(key)))
    }

    fn keys(&self) -> Vec<u64> {
        self.0.keys()
    }

    /// Structural violations found by walking the set; empty when it is well formed.
    fn validate(&self) -> Vec<String> {
        self.0.validate().violations
    }

    fn __len__(&self) -> usize {
        self.0.keys().len()
    }

    fn __contains__(&self, key: u64) -> PyResult<bool> {
        check(key)?;
        Ok(self.0.find(key).is_some())
    }

    #[getter]
    fn structure(&self) -> &'static str {
        self.0.kind().name()
    }
}

fn check(key: u64) -> PyResult<()> {
    if key == 0 || key == u64::MAX {
        return Err(PyValueError::new_err("keys 0 and 2**64-1 are reserved"));
    }
    Ok(())
}

/// Runs one timed workload and returns its counters as a dict.
#[pyfunction]
#[pyo3(signature = (structure = "leaftree", range = 100_000, updates = 50, alpha = 0.0, threads = 1, seconds = 1.0, mode = "lockfree", lock = "try", seed = 42, buckets = None))]
#[allow(clippy::too_many_arguments)]
fn run_workload<'py>(
    py: Python<'py>,
    structure: &str,
    range: u64,
    updates: u32,
    alpha: f64,
    threads: usize,
    seconds: f64,
    mode: &str,
    lock: &str,
    seed: u64,
    buckets: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = WorkloadSpec {
        structure: parse(structure)?,
        range,
        update_percent: updates,
        alpha,
        threads,
        seconds,
        mode: parse::<LockMode>(mode)?,
        lock: parse(lock)?,
        seed,
        buckets,
    };
    let r = py.detach(|| run(&spec)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("ops", r.ops)?;
    d.set_item("throughput", r.throughput())?;
    d.set_item("finds", r.finds)?;
    d.set_item("found", r.found)?;
    d.set_item("inserts", r.inserts)?;
    d.set_item("inserted", r.inserted)?;
    d.set_item("removes", r.removes)?;
    d.set_item("removed", r.removed)?;
    d.set_item("retries", r.retries)?;
    d.set_item("helps", r.helps)?;
    d.set_item("max_chain", r.max_chain())?;
    d.set_item("seconds", r.elapsed.as_secs_f64())?;
    d.set_item("size_before", r.size_before)?;
    d.set_item("size_after", r.size_after)?;
    Ok(d)
}

/// Runs a verification suite (or one case of it) and returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (suite, case = None, budget = 16, seed = 7, random_runs = 1000, histories = 100, ops = 100_000, threads = 4, storm_seconds = 0.2))]
#[allow(clippy::too_many_arguments)]
fn verify(
    py: Python<'_>,
    suite: &str,
    case: Option<&str>,
    budget: usize,
    seed: u64,
    random_runs: usize,
    histories: usize,
    ops: usize,
    threads: usize,
    storm_seconds: f64,
) -> PyResult<(bool, String)> {
    let s: Suite = parse(suite)?;
    let cfg = SuiteConfig {
        budget,
        seed,
        random_runs,
        histories,
        ops,
        threads,
        storm_seconds,
        storms: random_runs.min(1000),
        ..SuiteConfig::default()
    };
    let case = case.map(str::to_owned);
    py.detach(move || match case {
        Some(name) => {
            let c = suite::run_case(s, &name, &cfg).ok_or_else(|| PyValueError::new_err(format!("no case `{name}` in suite {s}")))?;
            Ok((c.ok(), format!("{s} {}: {}", c.name, c.report)))
        }
        None => {
            let out = suite::run(s, &cfg);
            Ok((out.passed(), out.to_string()))
        }
    })
}

#[pymodule(name = "idemlock")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lock>()?;
    m.add_class::<Cell>()?;
    m.add_class::<ConcurrentSet>()?;
    m.add_function(wrap_pyfunction!(try_lock, m)?)?;
    m.add_function(wrap_pyfunction!(strict_lock, m)?)?;
    m.add_function(wrap_pyfunction!(set_lock_mode, m)?)?;
    m.add_function(wrap_pyfunction!(lock_mode, m)?)?;
    m.add_function(wrap_pyfunction!(run_workload, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
