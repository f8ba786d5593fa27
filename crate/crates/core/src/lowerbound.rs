//! The hard instance on which every particle dies unless one of them guesses
//! the whole noise path.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Policy, ScriptedNoise, SystemSpec};
use crate::noise::NoiseDistribution;
use crate::pf::{run_pf_planner, FilterOptions, HistoryPolicy, ParticleEnsemble};
use crate::rng::{Domain, StreamKey};

/// Largest horizon for which `2^T` is held exactly as an integer.
pub const MAX_EXACT_HORIZON: usize = 120;

#[derive(Debug, Clone)]
pub struct LowerBoundInstance {
    pub horizon: usize,
    pub spec: SystemSpec,
    /// `o_t = t` for `t = 1..=T`.
    pub observations: Vec<DVector<f64>>,
    /// `1/p = 2^T`.
    pub inverse_p: u128,
}

impl LowerBoundInstance {
    pub fn p(&self) -> f64 {
        2f64.powi(-(self.horizon as i32))
    }

    /// The environment noise path that realizes the conditioned record.
    pub fn conditioned_noise(&self) -> ScriptedNoise {
        ScriptedNoise {
            transition_noises: vec![DVector::from_element(1, 1.0); self.horizon],
            obs_noises: vec![DVector::zeros(1); self.horizon],
        }
    }

    /// Largest `N` with `N ≤ 1/(2kp)`.
    pub fn max_particles_for(&self, k: u64) -> u128 {
        self.inverse_p / (2 * k as u128)
    }
}

pub fn build_lowerbound_process(horizon: usize) -> Result<LowerBoundInstance> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("lower-bound horizon must be at least 1".into()));
    }
    if horizon > MAX_EXACT_HORIZON {
        return Err(Error::InvalidParameter(format!(
            "lower-bound horizon must be at most {MAX_EXACT_HORIZON}"
        )));
    }
    let spec = SystemSpec::time_invariant(
        DMatrix::identity(1, 1),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
        NoiseDistribution::rademacher().with_subgaussian_m(1.0),
        NoiseDistribution::zero(1),
        DVector::zeros(1),
        horizon,
    );
    spec.ensure_valid()?;
    Ok(LowerBoundInstance {
        horizon,
        observations: (1..=horizon).map(|t| DVector::from_element(1, t as f64)).collect(),
        inverse_p: 1u128 << horizon,
        spec,
    })
}

/// `1 - (1 - p)^N`.
pub fn survival_probability_from_p(p: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    -(n as f64 * (-p).ln_1p()).exp_m1()
}

/// Probability that at least one of `N` particles draws the all-`+1` path.
pub fn survival_probability_exact(horizon: usize, n: u64) -> f64 {
    survival_probability_from_p(2f64.powi(-(horizon as i32)), n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeathReport {
    pub horizon: usize,
    pub particles: usize,
    pub replications: usize,
    pub survivors: usize,
    pub empirical: f64,
    pub exact: f64,
    pub sigma: f64,
    pub within_3_sigma: bool,
    pub k: u64,
    /// `1/k`, when `N ≤ 1/(2kp)` makes the bound applicable.
    pub bound_1_over_k: Option<f64>,
    pub bound_holds: Option<bool>,
    pub pass: bool,
}

/// Runs the planner `replications` times on the conditioned record.
pub fn run_death_experiment(horizon: usize, n: usize, replications: usize, k: u64, key: &StreamKey) -> Result<DeathReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if replications == 0 {
        return Err(Error::InvalidParameter("replications must be at least 1".into()));
    }
    let inst = build_lowerbound_process(horizon)?;
    let policy = Policy::linear(DMatrix::zeros(1, 1));
    let noise = inst.conditioned_noise();
    let outcomes: Result<Vec<bool>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let run = run_pf_planner(
                &inst.spec,
                &policy,
                n,
                &key.derive(Domain::Replication, r as u64),
                noise.clone(),
                FilterOptions {
                    history: HistoryPolicy::Drop,
                    record_noise_estimates: false,
                },
            )?;
            Ok(run.death_time.is_none())
        })
        .collect();
    let survivors = outcomes?.into_iter().filter(|&s| s).count();
    let reps = replications as f64;
    let empirical = survivors as f64 / reps;
    let exact = survival_probability_exact(horizon, n as u64);
    let sigma = (exact * (1.0 - exact) / reps).sqrt();
    let within_3_sigma = (empirical - exact).abs() <= 3.0 * sigma;
    let applicable = (n as u128) <= inst.max_particles_for(k);
    let bound_1_over_k = applicable.then(|| 1.0 / k as f64);
    let bound_holds = bound_1_over_k.map(|b| empirical <= b);
    Ok(DeathReport {
        horizon,
        particles: n,
        replications,
        survivors,
        empirical,
        exact,
        sigma,
        within_3_sigma,
        k,
        bound_1_over_k,
        bound_holds,
        pass: within_3_sigma && bound_holds.unwrap_or(true),
    })
}

/// True when every particle with positive weight followed `ξ_t = +1`, i.e.
/// sits on the path `x_t = t`.
pub fn survivors_follow_conditioned_path(ens: &ParticleEnsemble) -> Result<bool> {
    let history = ens.noise_history().ok_or(Error::HistoryDisabled)?;
    let t = ens.time() as f64;
    Ok((0..ens.len()).filter(|&i| ens.log_weights()[i] > f64::NEG_INFINITY).all(|i| {
        ens.log_weights()[i] == 0.0 && ens.states()[(0, i)] == t && history.iter().all(|h| h[(0, i)] == 1.0)
    }))
}
