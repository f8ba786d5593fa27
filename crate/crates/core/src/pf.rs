//! Particle filtering for sequential planning.
//!
//! Particles are propagated with the actions actually taken, weighted by the
//! observation likelihood, and never resampled. Weights are kept in log
//! space; an ensemble whose weights are all zero is dead and reported as
//! [`Error::ParticleDeath`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{affine_step_into, matvec, residual_into, CompensatedSum};
use crate::model::{Environment, NoiseSource, Policy, SystemSpec, Trajectory};
use crate::rng::StreamKey;

/// Noise history is kept by default up to this many stored scalars (`d·N·T`).
pub const HISTORY_AUTO_LIMIT: usize = 10_000_000;

/// Below this many state scalars per step, propagation stays on one thread.
const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryPolicy {
    #[default]
    Auto,
    Keep,
    Drop,
}

impl HistoryPolicy {
    fn resolve(self, d: usize, n: usize, horizon: usize) -> bool {
        match self {
            HistoryPolicy::Auto => d.saturating_mul(n).saturating_mul(horizon) <= HISTORY_AUTO_LIMIT,
            HistoryPolicy::Keep => true,
            HistoryPolicy::Drop => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    /// `d × N`, one column per particle.
    states: DMatrix<f64>,
    log_weights: Vec<f64>,
    /// `history[s]` holds `ξ_s^{(i)}` as columns.
    history: Option<Vec<DMatrix<f64>>>,
    actions: Vec<DVector<f64>>,
    time: usize,
}

struct Scratch {
    next: Vec<f64>,
    noise: Vec<f64>,
    residual: Vec<f64>,
}

impl ParticleEnsemble {
    /// `N` particles at `x0` with unit weight.
    pub fn new(spec: &SystemSpec, n: usize, history: HistoryPolicy) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let d = spec.state_dim;
        if spec.x0.len() != d {
            return Err(Error::DimensionMismatch {
                what: "x0".into(),
                expected: d,
                got: spec.x0.len(),
            });
        }
        let states = DMatrix::from_fn(d, n, |r, _| spec.x0[r]);
        let keep = history.resolve(d, n, spec.horizon);
        Ok(ParticleEnsemble {
            states,
            log_weights: vec![0.0; n],
            history: keep.then(|| Vec::with_capacity(spec.horizon)),
            actions: Vec::with_capacity(spec.horizon),
            time: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Per-time noise draws, if retained.
    pub fn noise_history(&self) -> Option<&[DMatrix<f64>]> {
        self.history.as_deref()
    }

    /// Actions fed to the particles so far.
    pub fn actions(&self) -> &[DVector<f64>] {
        &self.actions
    }

    pub fn is_dead(&self) -> bool {
        self.log_weights.iter().all(|&w| w == f64::NEG_INFINITY)
    }

    pub fn alive_count(&self) -> usize {
        self.log_weights.iter().filter(|&&w| w > f64::NEG_INFINITY).count()
    }

    /// Adds a constant to every log-weight (multiplies weights by `e^shift`).
    pub fn shift_log_weights(&mut self, shift: f64) {
        for w in &mut self.log_weights {
            *w += shift;
        }
    }

    /// Overwrites log-weights; for experiments on the estimator itself.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        if log_weights.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "log-weights".into(),
                expected: self.len(),
                got: log_weights.len(),
            });
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::InvalidParameter("log-weights must be finite or -inf".into()));
        }
        self.log_weights = log_weights;
        Ok(())
    }

    /// Overwrites particle states; for experiments on the estimator itself.
    pub fn set_states(&mut self, states: DMatrix<f64>) -> Result<()> {
        if states.shape() != self.states.shape() {
            return Err(Error::DimensionMismatch {
                what: "particle states".into(),
                expected: self.states.len(),
                got: states.len(),
            });
        }
        self.states = states;
        Ok(())
    }

    /// `exp(ℓ_i - max ℓ)`, the weights rescaled so the largest is 1.
    fn scaled_weights(&self) -> Result<(Vec<f64>, usize)> {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ParticleDeath { t: self.time });
        }
        let first = self
            .log_weights
            .iter()
            .position(|&w| w > f64::NEG_INFINITY)
            .expect("max is finite");
        Ok((self.log_weights.iter().map(|&w| (w - max).exp()).collect(), first))
    }

    /// Normalized weights `w_i / Σ w`.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let (w, _) = self.scaled_weights()?;
        let mut total = CompensatedSum::default();
        w.iter().for_each(|&v| total.add(v));
        let z = total.value();
        Ok(w.into_iter().map(|v| v / z).collect())
    }

    /// Weighted average of per-particle columns of `data`.
    ///
    /// Computed as `c + Σ w_i (v_i - c) / Σ w_i`, with `c` the first particle
    /// of positive weight and compensated sums in ascending particle order,
    /// so identical columns average to themselves exactly.
    pub fn weighted_average(&self, data: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (w, first) = self.scaled_weights()?;
        let rows = data.nrows();
        let anchor = data.column(first).clone_owned();
        let mut den = CompensatedSum::default();
        let mut num = vec![CompensatedSum::default(); rows];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            den.add(wi);
            let col = data.column(i);
            for r in 0..rows {
                num[r].add(wi * (col[r] - anchor[r]));
            }
        }
        let z = den.value();
        Ok(DVector::from_fn(rows, |r, _| anchor[r] + num[r].value() / z))
    }

    /// `ŷ_t`, the weighted mean of particle states.
    pub fn estimate_state(&self) -> Result<DVector<f64>> {
        self.weighted_average(&self.states)
    }

    /// `ξ̂_{t,s}` for `s = 0..t-1`.
    pub fn noise_estimates(&self) -> Result<Vec<DVector<f64>>> {
        let history = self.history.as_ref().ok_or(Error::HistoryDisabled)?;
        history.iter().map(|h| self.weighted_average(h)).collect()
    }

    /// Advances every particle with action `u_t` and reweights by `o_{t+1}`.
    /// Particle `i` draws its noise from stream `(i, t)` of `key`.
    pub fn step(&mut self, spec: &SystemSpec, action: &DVector<f64>, obs: &DVector<f64>, key: &StreamKey) -> Result<()> {
        let t = self.time;
        if t >= spec.horizon {
            return Err(Error::TimeOutOfRange { t, horizon: spec.horizon });
        }
        if action.len() != spec.action_dim {
            return Err(Error::DimensionMismatch {
                what: "action".into(),
                expected: spec.action_dim,
                got: action.len(),
            });
        }
        if obs.len() != spec.obs_dim {
            return Err(Error::DimensionMismatch {
                what: "observation".into(),
                expected: spec.obs_dim,
                got: obs.len(),
            });
        }
        let d = spec.state_dim;
        let n = self.len();
        let a = &spec.a_seq[t];
        let c = &spec.c_seq[t];
        let mu = &spec.transition_noise_seq[t];
        let eta = &spec.obs_noise_seq[t];
        let bu = matvec(&spec.b_seq[t], action.as_slice());
        let bu = bu.as_slice();
        let obs = obs.as_slice();
        let mut draws = DMatrix::zeros(d, n);

        let advance = |scratch: &mut Scratch, i: usize, x: &mut [f64], xi: &mut [f64], lw: &mut f64| {
            let mut rng = key.particle_stream(i, t);
            mu.sample_into(&mut rng, &mut scratch.noise);
            affine_step_into(a, x, bu, &scratch.noise, &mut scratch.next);
            x.copy_from_slice(&scratch.next);
            xi.copy_from_slice(&scratch.noise);
            if *lw > f64::NEG_INFINITY {
                residual_into(c, x, obs, &mut scratch.residual);
                *lw += eta.log_density(&scratch.residual);
            }
        };
        let new_scratch = || Scratch {
            next: vec![0.0; d],
            noise: vec![0.0; d],
            residual: vec![0.0; spec.obs_dim],
        };

        let states = self.states.as_mut_slice();
        let xis = draws.as_mut_slice();
        if d * n >= PARALLEL_THRESHOLD {
            states
                .par_chunks_mut(d)
                .zip(xis.par_chunks_mut(d))
                .zip(self.log_weights.par_iter_mut())
                .enumerate()
                .for_each_init(new_scratch, |scratch, (i, ((x, xi), lw))| advance(scratch, i, x, xi, lw));
        } else {
            let mut scratch = new_scratch();
            for (i, ((x, xi), lw)) in states
                .chunks_mut(d)
                .zip(xis.chunks_mut(d))
                .zip(self.log_weights.iter_mut())
                .enumerate()
            {
                advance(&mut scratch, i, x, xi, lw);
            }
        }
        if let Some(h) = self.history.as_mut() {
            h.push(draws);
        }
        self.actions.push(action.clone());
        self.time += 1;
        Ok(())
    }
}

/// Options shared by the planner and the fixed-record filter.
#[derive(Debug, Clone, Copy, Default)]
pub struct FilterOptions {
    pub history: HistoryPolicy,
    /// Record `ξ̂_{t,0:t-1}` at every step (needs history).
    pub record_noise_estimates: bool,
}

#[derive(Debug, Clone)]
pub struct PlannerRun {
    pub trajectory: Trajectory,
    /// `ŷ_0..ŷ_t` up to the last time the ensemble was alive.
    pub estimates: Vec<DVector<f64>>,
    /// `noise_estimates[t]` is `ξ̂_{t,0:t-1}` when recording was requested.
    pub noise_estimates: Vec<Vec<DVector<f64>>>,
    pub ensemble: ParticleEnsemble,
    /// First `t ≥ 1` at which every particle weight was zero.
    pub death_time: Option<usize>,
}

/// Closed-loop planning: estimate, act, observe, update.
pub fn run_pf_planner<S: NoiseSource>(
    spec: &SystemSpec,
    policy: &Policy,
    n: usize,
    particle_key: &StreamKey,
    source: S,
    options: FilterOptions,
) -> Result<PlannerRun> {
    spec.ensure_valid()?;
    let mut ensemble = ParticleEnsemble::new(spec, n, options.history)?;
    let mut env = Environment::new(spec, source);
    let mut estimates = Vec::with_capacity(spec.horizon + 1);
    let mut noise_estimates = Vec::new();
    let mut death_time = None;
    for t in 0..=spec.horizon {
        if options.record_noise_estimates {
            noise_estimates.push(match ensemble.noise_estimates() {
                Ok(v) => v,
                Err(Error::ParticleDeath { .. }) => Vec::new(),
                Err(e) => return Err(e),
            });
        }
        let y_hat = match ensemble.estimate_state() {
            Ok(y) => y,
            Err(Error::ParticleDeath { t }) => {
                death_time = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        estimates.push(y_hat);
        if t == spec.horizon {
            break;
        }
        let u = policy.apply(&estimates[t]);
        let obs = env.step(&u)?;
        ensemble.step(spec, &u, &obs, particle_key)?;
    }
    Ok(PlannerRun {
        trajectory: env.into_trajectory(),
        estimates,
        noise_estimates,
        ensemble,
        death_time,
    })
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Estimates at `t = 0..=len(record)`.
    pub estimates: Vec<DVector<f64>>,
    pub noise_estimates: Vec<Vec<DVector<f64>>>,
    pub ensemble: ParticleEnsemble,
}

/// Runs the estimator on a fixed record (no planning). `observations[t]` is
/// `o_{t+1}` and `actions[t]` is `u_t`.
pub fn filter_record(
    spec: &SystemSpec,
    observations: &[DVector<f64>],
    actions: &[DVector<f64>],
    n: usize,
    key: &StreamKey,
    options: FilterOptions,
) -> Result<FilterRun> {
    if observations.len() != actions.len() {
        return Err(Error::LengthMismatch {
            what: "observations vs actions".into(),
            expected: actions.len(),
            got: observations.len(),
        });
    }
    let mut ensemble = ParticleEnsemble::new(spec, n, options.history)?;
    let mut estimates = vec![ensemble.estimate_state()?];
    let mut noise_estimates = Vec::new();
    if options.record_noise_estimates {
        noise_estimates.push(Vec::new());
    }
    for (u, o) in actions.iter().zip(observations) {
        ensemble.step(spec, u, o, key)?;
        estimates.push(ensemble.estimate_state()?);
        if options.record_noise_estimates {
            noise_estimates.push(ensemble.noise_estimates()?);
        }
    }
    Ok(FilterRun {
        estimates,
        noise_estimates,
        ensemble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScriptedNoise, SampledNoise};
    use crate::noise::NoiseDistribution;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn gaussian_obs_spec(t: usize) -> SystemSpec {
        SystemSpec::scalar(
            1.0,
            1.0,
            1.0,
            NoiseDistribution::zero(1),
            NoiseDistribution::isotropic_gaussian(1, 1.0).unwrap(),
            0.0,
            t,
        )
    }

    fn lowerbound_spec(t: usize) -> SystemSpec {
        SystemSpec::scalar(1.0, 0.0, 1.0, NoiseDistribution::rademacher(), NoiseDistribution::zero(1), 0.0, t)
    }

    #[test]
    fn init_examples() {
        let mut s = gaussian_obs_spec(2);
        let e = ParticleEnsemble::new(&s, 1, HistoryPolicy::Auto).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.log_weights(), &[0.0]);
        s.x0 = v(&[5.0]);
        let e = ParticleEnsemble::new(&s, 3, HistoryPolicy::Auto).unwrap();
        assert_eq!(e.states().as_slice(), &[5.0, 5.0, 5.0]);
        assert_eq!(e.log_weights(), &[0.0, 0.0, 0.0]);
        assert_eq!(e.time(), 0);
        assert_eq!(ParticleEnsemble::new(&s, 0, HistoryPolicy::Auto), Err(Error::EmptyEnsemble));
    }

    #[test]
    fn estimate_examples() {
        let s = gaussian_obs_spec(1);
        let mut e = ParticleEnsemble::new(&s, 2, HistoryPolicy::Auto).unwrap();
        e.set_states(DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        assert_eq!(e.estimate_state().unwrap(), v(&[2.0]));
        e.set_states(DMatrix::from_row_slice(1, 2, &[0.0, 4.0])).unwrap();
        e.set_log_weights(vec![0.0, 3f64.ln()]).unwrap();
        assert!((e.estimate_state().unwrap()[0] - 3.0).abs() < 1e-15);
        e.set_log_weights(vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(e.estimate_state(), Err(Error::ParticleDeath { t: 0 }));
    }

    #[test]
    fn step_with_degenerate_noise_adds_density_at_origin() {
        let s = gaussian_obs_spec(1);
        let mut e = ParticleEnsemble::new(&s, 4, HistoryPolicy::Keep).unwrap();
        e.step(&s, &v(&[0.0]), &v(&[0.0]), &StreamKey::from_seed(1)).unwrap();
        assert_eq!(e.states().as_slice(), &[0.0; 4]);
        for &w in e.log_weights() {
            assert!((w + 0.918_938_5).abs() < 1e-7);
        }
        assert_eq!(e.time(), 1);
        assert!(matches!(
            e.step(&s, &v(&[0.0]), &v(&[0.0]), &StreamKey::from_seed(1)),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let s = gaussian_obs_spec(2);
        let mut e = ParticleEnsemble::new(&s, 2, HistoryPolicy::Auto).unwrap();
        let key = StreamKey::from_seed(1);
        assert!(matches!(e.step(&s, &v(&[0.0, 1.0]), &v(&[0.0]), &key), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(e.step(&s, &v(&[0.0]), &v(&[0.0, 0.0]), &key), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mismatched_atomic_observation_kills_the_particle() {
        let s = lowerbound_spec(3);
        let mut e = ParticleEnsemble::new(&s, 64, HistoryPolicy::Keep).unwrap();
        e.step(&s, &v(&[0.0]), &v(&[1.0]), &StreamKey::from_seed(2)).unwrap();
        let h = &e.noise_history().unwrap()[0];
        for i in 0..e.len() {
            if h[(0, i)] == -1.0 {
                assert_eq!(e.log_weights()[i], f64::NEG_INFINITY);
            } else {
                assert_eq!(e.log_weights()[i], 0.0);
            }
        }
    }

    #[test]
    fn zero_noise_particles_track_the_true_state() {
        let s = SystemSpec::scalar(0.9, 1.0, 1.0, NoiseDistribution::zero(1), NoiseDistribution::zero(1), 2.0, 6);
        let policy = Policy::linear(DMatrix::from_element(1, 1, -0.5));
        let run = run_pf_planner(
            &s,
            &policy,
            5,
            &StreamKey::from_seed(3),
            SampledNoise::new(StreamKey::from_seed(4)),
            FilterOptions::default(),
        )
        .unwrap();
        assert_eq!(run.death_time, None);
        assert_eq!(run.estimates, run.trajectory.states);
        for i in 0..5 {
            assert_eq!(run.ensemble.states()[(0, i)], run.trajectory.states[6][0]);
        }
    }

    #[test]
    fn planner_marks_death_and_halts() {
        let s = lowerbound_spec(4);
        let noise = ScriptedNoise {
            transition_noises: vec![v(&[1.0]); 4],
            obs_noises: vec![v(&[0.0]); 4],
        };
        let policy = Policy::linear(DMatrix::zeros(1, 1));
        // With one particle the run dies unless its draws are all +1.
        let mut deaths = 0;
        for seed in 0..200 {
            let run = run_pf_planner(&s, &policy, 1, &StreamKey::from_seed(seed), noise.clone(), FilterOptions::default())
                .unwrap();
            if let Some(t) = run.death_time {
                deaths += 1;
                assert_eq!(run.estimates.len(), t);
                assert_eq!(run.trajectory.steps(), t);
            }
        }
        assert!(deaths > 150);
    }
}
