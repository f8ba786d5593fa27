//! Approximate and ideal planners driven by the same noise realization.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::matvec;
use crate::model::{draw_noise_path, Environment, Policy, RewardFunction, ScriptedNoise, SystemSpec, Trajectory};
use crate::oracle::{OracleKind, PosteriorTracker};
use crate::pf::{run_pf_planner, FilterOptions, HistoryPolicy};
use crate::rng::{Domain, StreamKey};

#[derive(Debug, Clone, Copy, Default)]
pub struct CoupledOptions {
    pub history: HistoryPolicy,
    /// Keep `ξ̂_{t,·}` and `ξ̃_{t,·}` for every `t` (enumeration only for `ξ̃`).
    pub record_noise: bool,
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub transition_noises: Vec<DVector<f64>>,
    /// `obs_noises[t]` is `ζ_{t+1}`.
    pub obs_noises: Vec<DVector<f64>>,
    pub approx: Trajectory,
    pub ideal: Trajectory,
    /// `ŷ_t` while the ensemble was alive.
    pub approx_estimates: Vec<DVector<f64>>,
    /// `ỹ_t` for `t = 0..=T`.
    pub ideal_estimates: Vec<DVector<f64>>,
    pub approx_noise_estimates: Vec<Vec<DVector<f64>>>,
    pub ideal_noise_means: Vec<Vec<DVector<f64>>>,
    pub reward_approx: Option<f64>,
    pub reward_ideal: f64,
    pub reward_gap: Option<f64>,
    pub death_time: Option<usize>,
    /// Largest residual of `x_t - x*_t = Σ_s Π A B_s (û_s - u*_s)`, scaled by
    /// `max(1, ‖x_t‖, ‖x*_t‖)`.
    pub attribution_error: f64,
}

impl CoupledRun {
    /// `‖û_t - u*_t‖` for each action the approximate process took.
    pub fn action_gaps(&self) -> Vec<f64> {
        self.approx
            .actions
            .iter()
            .zip(&self.ideal.actions)
            .map(|(a, b)| (a - b).norm())
            .collect()
    }
}

/// Key layout for one coupled run.
pub fn run_keys(key: &StreamKey) -> (StreamKey, StreamKey, StreamKey) {
    (
        key.derive(Domain::Environment, 0),
        key.derive(Domain::Particles, 0),
        key.derive(Domain::Reference, 0),
    )
}

/// Runs the ideal planner, whose actions use the oracle posterior mean.
pub fn run_ideal_planner(
    spec: &SystemSpec,
    policy: &Policy,
    oracle: OracleKind,
    noise: ScriptedNoise,
    reference_key: &StreamKey,
    record_noise: bool,
) -> Result<(Trajectory, Vec<DVector<f64>>, Vec<Vec<DVector<f64>>>)> {
    let mut tracker = PosteriorTracker::new(spec, oracle, reference_key)?;
    let mut env = Environment::new(spec, noise);
    let mut estimates = Vec::with_capacity(spec.horizon + 1);
    let mut noise_means = Vec::new();
    for t in 0..=spec.horizon {
        estimates.push(tracker.mean(spec)?);
        if record_noise {
            if let Some(m) = tracker.noise_means(spec) {
                noise_means.push(m);
            }
        }
        if t == spec.horizon {
            break;
        }
        let u = policy.apply(&estimates[t]);
        let o = env.step(&u)?;
        tracker.step(spec, &u, &o)?;
    }
    Ok((env.into_trajectory(), estimates, noise_means))
}

fn attribution_error(spec: &SystemSpec, approx: &Trajectory, ideal: &Trajectory) -> f64 {
    let mut worst: f64 = 0.0;
    let mut predicted = DVector::zeros(spec.state_dim);
    for t in 1..=approx.steps() {
        let s = t - 1;
        let du = &approx.actions[s] - &ideal.actions[s];
        predicted = &spec.a_seq[s] * predicted + matvec(&spec.b_seq[s], du.as_slice());
        let (x, xs) = (&approx.states[t], &ideal.states[t]);
        let scale = 1f64.max(x.norm()).max(xs.norm());
        worst = worst.max(((x - xs) - &predicted).norm() / scale);
    }
    worst
}

pub fn run_coupled(
    spec: &SystemSpec,
    policy: &Policy,
    reward: &RewardFunction,
    n: usize,
    oracle: OracleKind,
    key: &StreamKey,
    options: CoupledOptions,
) -> Result<CoupledRun> {
    spec.ensure_valid()?;
    if policy.action_dim() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "policy output".into(),
            expected: spec.action_dim,
            got: policy.action_dim(),
        });
    }
    let (env_key, particle_key, reference_key) = run_keys(key);
    let noise = draw_noise_path(spec, env_key)?;
    let record_approx = options.record_noise && !matches!(options.history, HistoryPolicy::Drop);
    let approx = run_pf_planner(
        spec,
        policy,
        n,
        &particle_key,
        noise.clone(),
        FilterOptions {
            history: options.history,
            record_noise_estimates: record_approx,
        },
    )?;
    let (ideal, ideal_estimates, ideal_noise_means) =
        run_ideal_planner(spec, policy, oracle, noise.clone(), &reference_key, options.record_noise)?;

    let reward_ideal = ideal.reward(reward)?;
    let reward_approx = match approx.death_time {
        None => Some(approx.trajectory.reward(reward)?),
        Some(_) => None,
    };
    let attribution_error = attribution_error(spec, &approx.trajectory, &ideal);
    Ok(CoupledRun {
        transition_noises: noise.transition_noises,
        obs_noises: noise.obs_noises,
        reward_gap: reward_approx.map(|r| (r - reward_ideal).abs()),
        reward_approx,
        reward_ideal,
        death_time: approx.death_time,
        approx: approx.trajectory,
        ideal,
        approx_estimates: approx.estimates,
        ideal_estimates,
        approx_noise_estimates: approx.noise_estimates,
        ideal_noise_means,
        attribution_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub seed: usize,
    pub horizon: usize,
    pub reward_gap: Option<f64>,
    pub reward_approx: Option<f64>,
    pub reward_ideal: Option<f64>,
    pub died_at: Option<usize>,
    /// Set when the cell failed for a reason other than particle death.
    pub error: Option<String>,
    pub wall_time_ms: f64,
}

/// Runs `f` on a pool of `jobs` threads, or the global pool when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Full `N × seed` factorial; cell `(i, j)` uses `master.cell(i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn gap_sweep(
    spec: &SystemSpec,
    policy: &Policy,
    reward: &RewardFunction,
    n_list: &[usize],
    seeds: usize,
    oracle: OracleKind,
    master: &StreamKey,
    jobs: Option<usize>,
) -> Result<Vec<SweepRow>> {
    let cells: Vec<(usize, usize)> = (0..n_list.len()).flat_map(|i| (0..seeds).map(move |j| (i, j))).collect();
    with_jobs(jobs, || {
        cells
            .par_iter()
            .map(|&(i, j)| {
                let start = Instant::now();
                let run = run_coupled(spec, policy, reward, n_list[i], oracle, &master.cell(i, j), CoupledOptions {
                    history: HistoryPolicy::Drop,
                    record_noise: false,
                });
                let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
                let mut row = SweepRow {
                    n: n_list[i],
                    seed: j,
                    horizon: spec.horizon,
                    reward_gap: None,
                    reward_approx: None,
                    reward_ideal: None,
                    died_at: None,
                    error: None,
                    wall_time_ms,
                };
                match run {
                    Ok(r) => {
                        row.reward_gap = r.reward_gap;
                        row.reward_approx = r.reward_approx;
                        row.reward_ideal = Some(r.reward_ideal);
                        row.died_at = r.death_time;
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect()
    })
}
