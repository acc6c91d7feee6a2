//! Python bindings: scenario set-up, data generation, the three meta-analysis
//! models, the REML pooling primitives and the simulation harness.

use std::path::PathBuf;

use ipdma_core::harness::{self, RunConfig};
use ipdma_core::meta::{self, EffectEstimate, ResidualMode};
use ipdma_core::numerics::RngStream;
use ipdma_core::simgen::{self, IpdDataset, Observation, ScenarioConfig};
use ipdma_core::{Estimand, ModelTag};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn estimand(n: u8) -> PyResult<Estimand> {
    n.to_string().parse().map_err(value_err)
}

fn model(tag: &str) -> PyResult<ModelTag> {
    tag.parse().map_err(value_err)
}

/// Data-generating settings for one simulation scenario.
#[pyclass(name = "Scenario", module = "ipdma", frozen)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (num_trials, mean_trial_size, het_var = 0.0))]
    fn new(num_trials: usize, mean_trial_size: usize, het_var: f64) -> PyResult<Self> {
        let inner = ScenarioConfig::new(num_trials, mean_trial_size, het_var);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    /// One of the fourteen published scenarios (1-14).
    #[staticmethod]
    fn study(id: u32) -> PyResult<Self> {
        ScenarioConfig::study(id).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn num_trials(&self) -> usize {
        self.inner.num_trials
    }

    #[getter]
    fn mean_trial_size(&self) -> usize {
        self.inner.mean_trial_size()
    }

    #[getter]
    fn het_var(&self) -> f64 {
        self.inner.het_var
    }

    /// Analytic (tau2, avg_within_var, i2) for estimand 1 or 2.
    fn true_values(&self, estimand_id: u8) -> PyResult<(f64, f64, f64)> {
        let t = simgen::true_values(&self.inner, estimand(estimand_id)?).map_err(value_err)?;
        Ok((t.tau2, t.avg_within_var, t.i2))
    }

    /// Simulate one dataset from the stream for `(scenario_id, rep)`.
    #[pyo3(signature = (seed, scenario_id = 0, rep = 0))]
    fn generate(&self, seed: u64, scenario_id: u64, rep: u64) -> PyResult<PyDataset> {
        let mut rng = RngStream::for_replicate(seed, scenario_id, rep);
        simgen::generate_dataset(&self.inner, &mut rng).map(|inner| PyDataset { inner }).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(num_trials={}, mean_trial_size={}, het_var={})",
            self.inner.num_trials,
            self.inner.mean_trial_size(),
            self.inner.het_var
        )
    }
}

/// Long-format participant data: one row per participant visit.
#[pyclass(name = "Dataset", module = "ipdma", frozen)]
struct PyDataset {
    inner: IpdDataset,
}

#[pymethods]
impl PyDataset {
    /// Build from rows of `(trial, id, t, a, z, y, y0)`.
    #[new]
    fn new(rows: Vec<(u32, u32, f64, u8, u8, f64, f64)>) -> Self {
        let rows = rows
            .into_iter()
            .map(|(trial, id, t, a, z, y, y0)| Observation { trial, id, t, a, z, y, y0 })
            .collect();
        Self { inner: IpdDataset::new(rows) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn trial_ids(&self) -> Vec<u32> {
        self.inner.trial_ids()
    }

    fn num_participants(&self) -> usize {
        self.inner.num_participants()
    }

    fn rows(&self) -> Vec<(u32, u32, f64, u8, u8, f64, f64)> {
        self.inner.rows.iter().map(|o| (o.trial, o.id, o.t, o.a, o.z, o.y, o.y0)).collect()
    }

    fn trial(&self, trial: u32) -> PyDataset {
        PyDataset { inner: self.inner.trial(trial) }
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<PyDataset> {
        IpdDataset::read_csv(text.as_bytes()).map(|inner| PyDataset { inner }).map_err(value_err)
    }

    /// Fit `model` ("M2", "M1s" or "M1c") for estimand 1 or 2.
    fn analyse(&self, model_tag: &str, estimand_id: u8) -> PyResult<PyMetaResult> {
        let e = estimand(estimand_id)?;
        let r = match model(model_tag)? {
            ModelTag::M2 => meta::run_two_stage(&self.inner, e),
            ModelTag::M1s => meta::run_one_stage(&self.inner, e, ResidualMode::PerTrial),
            ModelTag::M1c => meta::run_one_stage(&self.inner, e, ResidualMode::Common),
        };
        r.map(|inner| PyMetaResult { inner }).map_err(value_err)
    }
}

/// Heterogeneity summary of one fitted meta-analysis.
#[pyclass(name = "MetaResult", module = "ipdma", frozen)]
struct PyMetaResult {
    inner: meta::MetaResult,
}

#[pymethods]
impl PyMetaResult {
    #[getter]
    fn model(&self) -> String {
        self.inner.model.to_string()
    }

    #[getter]
    fn estimand(&self) -> u8 {
        self.inner.estimand.number()
    }

    #[getter]
    fn tau2(&self) -> f64 {
        self.inner.tau2_hat
    }

    /// 95% interval for tau2; either limit may be `None`.
    #[getter]
    fn tau2_ci(&self) -> (Option<f64>, Option<f64>) {
        (self.inner.tau2_ci.lo, self.inner.tau2_ci.hi)
    }

    #[getter]
    fn avg_within_var(&self) -> f64 {
        self.inner.avg_within_var
    }

    #[getter]
    fn i2(&self) -> f64 {
        self.inner.i2
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.pooled_theta
    }

    #[getter]
    fn theta_se(&self) -> f64 {
        self.inner.pooled_se
    }

    #[getter]
    fn trial_ids(&self) -> Vec<u32> {
        self.inner.trial_ids.clone()
    }

    #[getter]
    fn fixed_weights(&self) -> Vec<f64> {
        self.inner.fixed_weights.clone()
    }

    #[getter]
    fn random_weights(&self) -> Vec<f64> {
        self.inner.random_weights.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "MetaResult(model={}, estimand={}, tau2={:.6}, avg_within_var={:.6}, i2={:.2})",
            self.inner.model, self.inner.estimand, self.inner.tau2_hat, self.inner.avg_within_var, self.inner.i2
        )
    }
}

fn estimates(thetas: &[f64], ses: &[f64]) -> PyResult<Vec<EffectEstimate>> {
    if thetas.len() != ses.len() {
        return Err(PyValueError::new_err("thetas and ses differ in length"));
    }
    Ok(thetas.iter().zip(ses).enumerate().map(|(j, (&t, &s))| EffectEstimate::new(j as u32 + 1, t, s)).collect())
}

/// REML random-effects pooling of per-trial estimates: (tau2, theta, se).
#[pyfunction]
fn pool_reml(thetas: Vec<f64>, ses: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let p = meta::pool_reml(&estimates(&thetas, &ses)?).map_err(value_err)?;
    Ok((p.tau2_hat, p.pooled_theta, p.pooled_se))
}

/// Profile-likelihood interval for tau2 around its REML estimate.
#[pyfunction]
#[pyo3(signature = (thetas, ses, level = 0.95))]
fn profile_ci_tau2(thetas: Vec<f64>, ses: Vec<f64>, level: f64) -> PyResult<(Option<f64>, Option<f64>)> {
    let es = estimates(&thetas, &ses)?;
    let p = meta::pool_reml(&es).map_err(value_err)?;
    let ci = meta::profile_ci_tau2(&es, p.tau2_hat, level);
    Ok((ci.lo, ci.hi))
}

/// I² in percent from tau2 and the average within-trial variance.
#[pyfunction]
fn i_squared(tau2: f64, avg_within_var: f64) -> f64 {
    meta::i_squared(tau2, avg_within_var)
}

/// Run the simulation study and write its result files to `out`.
///
/// `options` takes the same keys as the key = value config file. Returns the
/// number of replicate rows written.
#[pyfunction]
#[pyo3(signature = (out, **options))]
fn run(out: PathBuf, options: Option<&Bound<'_, PyDict>>) -> PyResult<usize> {
    let mut cfg = RunConfig::default();
    cfg.apply_env().map_err(value_err)?;
    if let Some(opts) = options {
        for (k, v) in opts.iter() {
            cfg.set(&k.str()?.to_string(), &v.str()?.to_string()).map_err(value_err)?;
        }
    }
    cfg.out = out;
    harness::run(&cfg).map(|o| o.records.len()).map_err(value_err)
}

#[pymodule]
fn ipdma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMetaResult>()?;
    m.add_function(wrap_pyfunction!(pool_reml, m)?)?;
    m.add_function(wrap_pyfunction!(profile_ci_tau2, m)?)?;
    m.add_function(wrap_pyfunction!(i_squared, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
