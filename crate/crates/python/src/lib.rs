//! Python bindings.
//!
//! Vectors cross the boundary as lists of floats and matrices as lists of
//! rows. Configuration and input errors raise `ValueError`; failures during a
//! run (particle death, enumeration budget) raise `RuntimeError`.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pfplan_core::analysis::{bound_calculator, BoundParams, BoundVariant};
use pfplan_core::cli;
use pfplan_core::config::{system_from_toml, system_to_toml, BoundsOptions, RunConfig};
use pfplan_core::coupled::{run_coupled, CoupledOptions};
use pfplan_core::lowerbound::{build_lowerbound_process, run_death_experiment, survival_probability_exact};
use pfplan_core::model::SystemSpec;
use pfplan_core::noise::NoiseDistribution;
use pfplan_core::oracle::{enumerate_posterior_mean, kalman_posterior_mean, reference_filter_mean, DEFAULT_MAX_PATHS};
use pfplan_core::presets;
use pfplan_core::rng::StreamKey;
use pfplan_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::ParticleDeath { .. }
        | Error::PathBudgetExceeded { .. }
        | Error::SingularInnovation { .. }
        | Error::ImpossibleObservation { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vectors(rows: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    rows.into_iter().map(DVector::from_vec).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// A partially observed linear system.
#[pyclass(frozen, skip_from_py_object, module = "pfplan")]
#[derive(Clone)]
struct System {
    spec: SystemSpec,
}

#[pymethods]
impl System {
    /// Parses a `[system]` TOML document.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(System {
            spec: system_from_toml(text).map_err(py_err)?,
        })
    }

    /// Scalar system with Gaussian transition and observation noise.
    #[staticmethod]
    #[pyo3(signature = (a, b, c, q, r, x0 = 0.0, horizon = 5))]
    fn scalar_gaussian(a: f64, b: f64, c: f64, q: f64, r: f64, x0: f64, horizon: usize) -> PyResult<Self> {
        let noise = |v: f64| NoiseDistribution::isotropic_gaussian(1, v).map_err(py_err);
        Ok(System {
            spec: SystemSpec::scalar(a, b, c, noise(q)?, noise(r)?, x0, horizon),
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        system_to_toml(&self.spec).map_err(py_err)
    }

    /// Problems found by validation; empty when the system is well formed.
    fn validate(&self) -> Vec<String> {
        self.spec.validate().violations
    }

    fn truncated(&self, horizon: usize) -> Self {
        System {
            spec: self.spec.truncated(horizon),
        }
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.spec.x0.iter().copied().collect()
    }

    fn a(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.spec.a_seq.get(t).map(rows).ok_or_else(|| PyValueError::new_err("t out of range"))
    }

    fn __repr__(&self) -> String {
        format!(
            "System(state_dim={}, action_dim={}, obs_dim={}, horizon={})",
            self.spec.state_dim, self.spec.action_dim, self.spec.obs_dim, self.spec.horizon
        )
    }
}

/// A full run configuration: system, policy, reward, oracle and sweep grid.
#[pyclass(frozen, module = "pfplan")]
struct Config {
    cfg: RunConfig,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Config {
            cfg: presets::preset(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Config {
            cfg: RunConfig::from_toml(text, None).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        presets::NAMES.to_vec()
    }

    #[getter]
    fn system(&self) -> Option<System> {
        self.cfg.spec.clone().map(|spec| System { spec })
    }

    #[getter]
    fn n_list(&self) -> Vec<usize> {
        self.cfg.n_list.clone()
    }

    #[getter]
    fn seeds(&self) -> usize {
        self.cfg.seeds
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.cfg.master_seed
    }

    /// Copy with a different sweep grid.
    #[pyo3(signature = (n_list = None, seeds = None, master_seed = None))]
    fn with_run(&self, n_list: Option<Vec<usize>>, seeds: Option<usize>, master_seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = self.cfg.clone();
        if let Some(n) = n_list {
            if n.is_empty() || n[0] == 0 || n.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PyValueError::new_err("n_list must be nonempty, strictly ascending and positive"));
            }
            cfg.n_list = n;
        }
        if let Some(s) = seeds {
            if s == 0 {
                return Err(PyValueError::new_err("seeds must be at least 1"));
            }
            cfg.seeds = s;
        }
        if let Some(m) = master_seed {
            cfg.master_seed = m;
        }
        Ok(Config { cfg })
    }
}

/// One coupled pair of runs with `n` particles. Returns a dict with the
/// rewards, the gap, the death time and the per-step action gaps.
#[pyfunction]
#[pyo3(signature = (config, n, seed = 0))]
fn coupled_run<'py>(py: Python<'py>, config: PyRef<'_, Config>, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.cfg;
    let spec = cfg.require_spec().map_err(py_err)?;
    let policy = cfg.require_policy().map_err(py_err)?;
    let oracle = cfg.oracle.resolve(spec);
    let run = py
        .detach(|| run_coupled(spec, policy, &cfg.reward, n, oracle, &StreamKey::from_seed(seed), CoupledOptions::default()))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("reward_approx", run.reward_approx)?;
    d.set_item("reward_ideal", run.reward_ideal)?;
    d.set_item("reward_gap", run.reward_gap)?;
    d.set_item("died_at", run.death_time)?;
    d.set_item("action_gaps", run.action_gaps())?;
    d.set_item("attribution_error", run.attribution_error)?;
    let states: Vec<Vec<f64>> = run.approx.states.iter().map(|x| x.iter().copied().collect()).collect();
    d.set_item("states", states)?;
    Ok(d)
}

/// Per-run CSV of the regret experiment, and its per-(N, T) summary CSV.
#[pyfunction]
fn experiment(py: Python<'_>, config: PyRef<'_, Config>) -> PyResult<(String, String)> {
    let cfg = &config.cfg;
    let out = py.detach(|| cli::experiment(cfg)).map_err(py_err)?;
    Ok((out.csv().map_err(py_err)?, out.summary_csv().map_err(py_err)?))
}

/// Reward-gap sweep CSV over the config's N list and seeds.
#[pyfunction]
fn sweep(py: Python<'_>, config: PyRef<'_, Config>) -> PyResult<String> {
    let cfg = &config.cfg;
    let rows = py.detach(|| cli::sweep(cfg)).map_err(py_err)?;
    cli::sweep_csv(&rows).map_err(py_err)
}

/// Exact Gaussian posterior mean and covariance after the full record.
#[pyfunction]
fn kalman_mean(system: PyRef<'_, System>, observations: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = kalman_posterior_mean(&system.spec, &vectors(observations), &vectors(actions)).map_err(py_err)?;
    Ok((k.mean.iter().copied().collect(), rows(&k.covariance)))
}

/// Exact posterior mean for finite-support transition noise.
#[pyfunction]
#[pyo3(signature = (system, observations, actions, max_paths = DEFAULT_MAX_PATHS))]
fn enumeration_mean(
    system: PyRef<'_, System>,
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    max_paths: usize,
) -> PyResult<Vec<f64>> {
    let e = enumerate_posterior_mean(&system.spec, &vectors(observations), &vectors(actions), max_paths).map_err(py_err)?;
    Ok(e.mean.iter().copied().collect())
}

/// Large-ensemble particle approximation of the posterior mean.
#[pyfunction]
#[pyo3(signature = (system, observations, actions, particles = 100_000, seed = 0))]
fn reference_mean(
    py: Python<'_>,
    system: PyRef<'_, System>,
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    particles: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let (obs, acts) = (vectors(observations), vectors(actions));
    let spec = &system.spec;
    let y = py
        .detach(|| reference_filter_mean(spec, &obs, &acts, particles, &StreamKey::from_seed(seed)))
        .map_err(py_err)?;
    Ok(y.iter().copied().collect())
}

/// `1 - (1 - 2^-T)^N`.
#[pyfunction]
fn survival_probability(horizon: usize, particles: u64) -> f64 {
    survival_probability_exact(horizon, particles)
}

/// The conditioned observation record of the lower-bound instance and its
/// likelihood `p = 2^-T`.
#[pyfunction]
fn lowerbound_instance(horizon: usize) -> PyResult<(System, Vec<f64>, f64)> {
    let inst = build_lowerbound_process(horizon).map_err(py_err)?;
    let obs = inst.observations.iter().map(|o| o[0]).collect();
    let p = inst.p();
    Ok((System { spec: inst.spec }, obs, p))
}

/// Monte Carlo survival frequency on the lower-bound instance.
#[pyfunction]
#[pyo3(signature = (horizon, particles, replications = 10_000, k = 2, seed = 0))]
fn death_experiment<'py>(
    py: Python<'py>,
    horizon: usize,
    particles: usize,
    replications: usize,
    k: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| run_death_experiment(horizon, particles, replications, k, &StreamKey::from_seed(seed)))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("empirical", r.empirical)?;
    d.set_item("exact", r.exact)?;
    d.set_item("sigma", r.sigma)?;
    d.set_item("survivors", r.survivors)?;
    d.set_item("within_3_sigma", r.within_3_sigma)?;
    d.set_item("bound_1_over_k", r.bound_1_over_k)?;
    d.set_item("pass", r.pass)?;
    Ok(d)
}

/// Particle-count expressions for one horizon. Unset constants default to 1.
#[pyfunction]
#[pyo3(signature = (horizon, variant = "nonlinear", **constants))]
fn bounds<'py>(
    py: Python<'py>,
    horizon: usize,
    variant: &str,
    constants: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let variant = match variant {
        "nonlinear" => BoundVariant::Nonlinear,
        "linear" => BoundVariant::Linear,
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    };
    let mut p: BoundParams = BoundsOptions::default().params(horizon);
    if let Some(c) = constants {
        for (key, value) in c.iter() {
            let name: String = key.extract()?;
            match name.as_str() {
                "d" => p.d = value.extract()?,
                _ => {
                    let v: f64 = value.extract()?;
                    let slot = match name.as_str() {
                        "l_r" => &mut p.l_r,
                        "l_g" => &mut p.l_g,
                        "c_a" => &mut p.c_a,
                        "rho_a" => &mut p.rho_a,
                        "c_b" => &mut p.c_b,
                        "c_ab" => &mut p.c_ab,
                        "rho_ab" => &mut p.rho_ab,
                        "c_bg" => &mut p.c_bg,
                        "m" => &mut p.subgaussian_m,
                        "epsilon" => &mut p.epsilon,
                        "delta" => &mut p.delta,
                        "p" => &mut p.p,
                        other => return Err(PyValueError::new_err(format!("unknown constant `{other}`"))),
                    };
                    *slot = v;
                }
            }
        }
    }
    let r = bound_calculator(&p, variant).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("sigma_a", r.sigma_a)?;
    d.set_item("sigma_ab", r.sigma_ab)?;
    d.set_item("sigma_ab_bar", r.sigma_ab_bar)?;
    d.set_item("delta_nonlinear", r.delta_nonlinear)?;
    d.set_item("delta_linear", r.delta_linear)?;
    d.set_item("n_expression", r.n_expression)?;
    d.set_item("log_factor", r.log_factor)?;
    d.set_item("stable_n", r.stable_n)?;
    Ok(d)
}

/// Invariant suite on a config; returns `(status, property, detail)` triples.
#[pyfunction]
fn validate(config: PyRef<'_, Config>) -> Vec<(String, String, String)> {
    cli::bound_regressions()
        .into_iter()
        .chain(cli::validate_config("python", &config.cfg))
        .map(|c| (c.status.label().to_string(), c.property, c.detail))
        .collect()
}

#[pymodule]
fn pfplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<System>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(coupled_run, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_mean, m)?)?;
    m.add_function(wrap_pyfunction!(enumeration_mean, m)?)?;
    m.add_function(wrap_pyfunction!(reference_mean, m)?)?;
    m.add_function(wrap_pyfunction!(survival_probability, m)?)?;
    m.add_function(wrap_pyfunction!(lowerbound_instance, m)?)?;
    m.add_function(wrap_pyfunction!(death_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    Ok(())
}
