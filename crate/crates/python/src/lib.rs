//! Python bindings: simulation, sampling, the three estimators, the Monte
//! Carlo harness and the asymptotic information oracle.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ncc_core::estimators::{self, CoxRiskSets, ProposedOptions, WeightReference};
use ncc_core::harness::{self, HarnessOptions};
use ncc_core::nalgebra::DMatrix;
use ncc_core::{io, sim, theory, Bandwidth, Error, KernelConfig, KernelShape, ShortfallPolicy};

create_exception!(nccox, NonConvergenceError, PyException, "The estimating equation has no acceptable root.");
create_exception!(nccox, NumericalError, PyException, "A matrix expected positive definite was not.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonConvergence { .. } => NonConvergenceError::new_err(e.to_string()),
        Error::Conditioning(_) => NumericalError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// A simulation design.
#[pyclass(name = "Scenario", module = "nccox", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: sim::ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    /// The scalar design with `Z(t) = 4 t u1 + u2`; `censoring` is "fixed" or "random".
    #[new]
    #[pyo3(signature = (beta=0.0, m=1, censoring="fixed", n=200))]
    fn new(beta: f64, m: usize, censoring: &str, n: usize) -> PyResult<Self> {
        let c = match censoring {
            "fixed" => sim::Censoring::fixed(1.0),
            "random" => sim::Censoring::random_abs_z(0.25, 1.0),
            other => return Err(PyValueError::new_err(format!("unknown censoring '{other}'"))),
        };
        let mut inner = sim::ScenarioConfig::table1(beta, m, c);
        inner.n = n;
        inner.validate().map_err(py_err)?;
        Ok(PyScenario { inner })
    }

    /// Parses the flat `key = value` config format.
    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: io::parse_config(text).map_err(py_err)?,
        })
    }

    fn to_config(&self) -> String {
        io::format_config(&self.inner)
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn censoring(&self) -> &'static str {
        self.inner.censoring.label()
    }

    fn __repr__(&self) -> String {
        format!("Scenario({})", harness::scenario_id(&self.inner))
    }
}

#[pyclass(name = "Cohort", module = "nccox", from_py_object)]
#[derive(Clone)]
struct PyCohort {
    inner: ncc_core::Cohort,
    law: sim::CovariateLaw,
}

#[pymethods]
impl PyCohort {
    #[staticmethod]
    fn simulate(scenario: &PyScenario, seed: u64) -> PyResult<Self> {
        let sc = &scenario.inner;
        Ok(PyCohort {
            inner: sim::generate_cohort(sc, sc.n, seed).map_err(py_err)?,
            law: sc.covariate_law,
        })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf, scenario: &PyScenario) -> PyResult<Self> {
        let sc = &scenario.inner;
        Ok(PyCohort {
            inner: io::read_cohort(&path, &sc.covariate_law, sc.tau).map_err(py_err)?,
            law: sc.covariate_law,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        io::write_cohort(&path, &self.inner, &self.law).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn failures(&self) -> usize {
        self.inner.failures()
    }

    fn censoring_proportion(&self) -> f64 {
        self.inner.censoring_proportion()
    }

    /// `(y, delta)` per subject.
    fn observations(&self) -> Vec<(f64, bool)> {
        self.inner.subjects().iter().map(|s| (s.y, s.delta)).collect()
    }
}

/// A time-restricted nested case-control sample.
#[pyclass(name = "NccData", module = "nccox", from_py_object)]
#[derive(Clone)]
struct PyNcc {
    inner: ncc_core::NccDataset,
}

#[pymethods]
impl PyNcc {
    #[staticmethod]
    #[pyo3(signature = (cohort, m, seed, shortfall="drop"))]
    fn sample(cohort: &PyCohort, m: usize, seed: u64, shortfall: &str) -> PyResult<Self> {
        let policy: ShortfallPolicy = parse(shortfall)?;
        Ok(PyNcc {
            inner: sim::sample_ncc(&cohort.inner, m, seed, policy).map_err(py_err)?,
        })
    }

    /// `n` is the size of the cohort the sample came from.
    #[staticmethod]
    #[pyo3(signature = (path, n, m=None, tau=1.0))]
    fn read_csv(path: PathBuf, n: usize, m: Option<usize>, tau: f64) -> PyResult<Self> {
        Ok(PyNcc {
            inner: io::read_ncc(&path, n, m, tau).map_err(py_err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        io::write_ncc(&path, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times().collect()
    }

    /// Same sample with every covariate shifted by `c`.
    fn shifted(&self, c: Vec<f64>) -> PyResult<Self> {
        if c.len() != self.inner.dim() {
            return Err(py_err(Error::Dimension {
                expected: self.inner.dim(),
                found: c.len(),
            }));
        }
        Ok(PyNcc {
            inner: self.inner.shifted(&c),
        })
    }
}

#[pyclass(name = "FitResult", module = "nccox", frozen, skip_from_py_object)]
struct PyFit {
    #[pyo3(get)]
    beta_hat: Vec<f64>,
    #[pyo3(get)]
    vcov: Vec<Vec<f64>>,
    #[pyo3(get)]
    sigma_hat: Vec<Vec<f64>>,
    #[pyo3(get)]
    std_errors: Vec<f64>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    final_score_norm: f64,
    #[pyo3(get)]
    pilot_beta_hat: Option<Vec<f64>>,
    #[pyo3(get)]
    locally_monotone: Option<bool>,
}

impl PyFit {
    fn new(f: &estimators::FitResult) -> Self {
        PyFit {
            beta_hat: f.beta_hat.clone(),
            vcov: rows(&f.vcov),
            sigma_hat: rows(&f.sigma_hat),
            std_errors: f.std_errors(),
            iterations: f.iterations,
            converged: f.converged,
            final_score_norm: f.final_score_norm,
            pilot_beta_hat: None,
            locally_monotone: None,
        }
    }
}

#[pymethods]
impl PyFit {
    fn __repr__(&self) -> String {
        format!("FitResult(beta_hat={:?}, std_errors={:?})", self.beta_hat, self.std_errors)
    }
}

fn harness_options(bandwidth: Option<f64>, kernel: &str, weight_ref: &str) -> PyResult<HarnessOptions> {
    let mut k = KernelConfig {
        shape: parse::<KernelShape>(kernel)?,
        ..KernelConfig::default()
    };
    if let Some(h) = bandwidth {
        k.bandwidth = Bandwidth::Fixed(h);
    }
    Ok(HarnessOptions {
        kernel: k,
        proposed: ProposedOptions {
            weight_ref: parse::<WeightReference>(weight_ref)?,
            ..ProposedOptions::default()
        },
    })
}

/// Full-cohort Cox estimator.
#[pyfunction]
fn cox_fit(cohort: &PyCohort) -> PyResult<PyFit> {
    let rs = CoxRiskSets::from_cohort(&cohort.inner).map_err(py_err)?;
    Ok(PyFit::new(&estimators::cox_fit(&rs, None).map_err(py_err)?))
}

#[pyfunction]
fn thomas_fit(ncc: &PyNcc) -> PyResult<PyFit> {
    Ok(PyFit::new(&estimators::thomas_fit(&ncc.inner, None).map_err(py_err)?))
}

/// Kernel-weighted estimator; the default bandwidth is `0.05 (n / 200)^(-1/3)`.
#[pyfunction]
#[pyo3(signature = (ncc, bandwidth=None, kernel="indicator", weight_ref="pilot"))]
fn proposed_fit(ncc: &PyNcc, bandwidth: Option<f64>, kernel: &str, weight_ref: &str) -> PyResult<PyFit> {
    let opts = harness_options(bandwidth, kernel, weight_ref)?;
    let p = estimators::proposed_fit(&ncc.inner, &opts.kernel, &opts.proposed).map_err(py_err)?;
    Ok(PyFit {
        pilot_beta_hat: p.pilot.map(|f| f.beta_hat),
        locally_monotone: p.locally_monotone,
        ..PyFit::new(&p.fit)
    })
}

/// Monte Carlo summary of one design: a dict keyed by estimator name.
#[pyfunction]
#[pyo3(signature = (scenario, reps, seed, threads=0))]
fn run_scenario<'py>(py: Python<'py>, scenario: &PyScenario, reps: usize, seed: u64, threads: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = py
        .detach(|| harness::run_scenario(&scenario.inner, reps, seed, threads, &HarnessOptions::default()))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("scenario", &s.scenario)?;
    out.set_item("reps", s.reps)?;
    out.set_item("cen_prop", s.cen_prop)?;
    for e in &s.estimators {
        let d = PyDict::new(py);
        d.set_item("ave_est", e.ave_est.clone())?;
        d.set_item("emp_var", e.emp_var.clone())?;
        d.set_item("est_var", e.est_var.clone())?;
        d.set_item("failures", e.failures)?;
        d.set_item("degenerate", e.degenerate)?;
        out.set_item(e.estimator.name(), d)?;
    }
    Ok(out)
}

/// Asymptotic information matrices of the three estimators for a design.
#[pyfunction]
#[pyo3(signature = (scenario, draws, grid=200, seed=1))]
fn mc_sigma<'py>(py: Python<'py>, scenario: &PyScenario, draws: usize, grid: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let sc = &scenario.inner;
    let r = py
        .detach(|| theory::mc_sigma(sc, &theory::uniform_grid(sc.tau, grid), draws, seed))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    for (name, m, se) in [
        ("sigma_c", &r.sigma_c, &r.se_c),
        ("sigma_a", &r.sigma_a, &r.se_a),
        ("sigma_p", &r.sigma_p, &r.se_p),
        ("sigma_p_alt", &r.sigma_p_alt, &r.se_p_alt),
        ("sigma", &r.sigma, &r.se),
    ] {
        out.set_item(name, rows(m))?;
        out.set_item(format!("{name}_se"), rows(se))?;
    }
    Ok(out)
}

#[pymodule]
fn nccox(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyCohort>()?;
    m.add_class::<PyNcc>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(cox_fit, m)?)?;
    m.add_function(wrap_pyfunction!(thomas_fit, m)?)?;
    m.add_function(wrap_pyfunction!(proposed_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(mc_sigma, m)?)?;
    m.add("NonConvergenceError", m.py().get_type::<NonConvergenceError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
