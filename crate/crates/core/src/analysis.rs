//! Decomposition identities, noise-space estimators, concentration and
//! action-gap checks, and the particle-count bound calculators.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coupled::CoupledRun;
use crate::error::{Error, Result};
use crate::linalg::{matvec, op_norm, rel_diff};
use crate::model::{Policy, SystemSpec, Trajectory};
use crate::oracle::{reconstruct, EnumerationDag, EnumerationPosterior};
use crate::pf::{filter_record, FilterOptions, HistoryPolicy, ParticleEnsemble};
use crate::rng::{Domain, StreamKey};

pub use crate::oracle::likelihood_gamma;

/// `x_t` written directly as a sum over past noise and actions.
pub fn decompose_state(spec: &SystemSpec, actions: &[DVector<f64>], noises: &[DVector<f64>], t: usize) -> Result<DVector<f64>> {
    if t > spec.horizon {
        return Err(Error::TimeOutOfRange { t, horizon: spec.horizon });
    }
    for (what, len) in [("actions", actions.len()), ("noises", noises.len())] {
        if len < t {
            return Err(Error::LengthMismatch {
                what: what.into(),
                expected: t,
                got: len,
            });
        }
    }
    Ok(reconstruct(spec, &noises[..t], &actions[..t]))
}

/// `ξ̂_{t,s} = Σ w_i ξ_s^{(i)} / Σ w_i` for `s < t`.
pub fn ensemble_noise_estimators(ens: &ParticleEnsemble) -> Result<Vec<DVector<f64>>> {
    ens.noise_estimates()
}

/// Relative distance between `ŷ_t` and its reconstruction from `ξ̂_{t,·}`.
pub fn reconstruction_error(spec: &SystemSpec, ens: &ParticleEnsemble) -> Result<f64> {
    let y = ens.estimate_state()?;
    let xi = ens.noise_estimates()?;
    Ok(rel_diff(&y, &reconstruct(spec, &xi, ens.actions())))
}

/// Largest relative gap between each particle state and the decomposition
/// of its own noise history.
pub fn particle_replay_error(spec: &SystemSpec, ens: &ParticleEnsemble) -> Result<f64> {
    let history = ens.noise_history().ok_or(Error::HistoryDisabled)?;
    let mut worst: f64 = 0.0;
    for i in 0..ens.len() {
        let noises: Vec<_> = history.iter().map(|h| h.column(i).clone_owned()).collect();
        let x = reconstruct(spec, &noises, ens.actions());
        worst = worst.max(rel_diff(&x, &ens.states().column(i).clone_owned()));
    }
    Ok(worst)
}

/// Maximal relative difference of `γ_t`, `Γ_{t,s}` and `ξ̃_{t,s}` computed
/// from the two coupled records, over every `t` both runs reached.
pub fn coupling_identity_error(spec: &SystemSpec, approx: &Trajectory, ideal: &Trajectory, max_paths: usize) -> Result<f64> {
    let steps = approx.steps().min(ideal.steps());
    let mut a = EnumerationDag::new(spec, max_paths)?;
    let mut b = EnumerationDag::new(spec, max_paths)?;
    let mut worst: f64 = 0.0;
    for t in 0..steps {
        a.step(spec, &approx.actions[t], &approx.observations[t])?;
        b.step(spec, &ideal.actions[t], &ideal.observations[t])?;
        worst = worst.max(posterior_gap(&a.posterior(spec, t + 1), &b.posterior(spec, t + 1)));
    }
    Ok(worst)
}

fn posterior_gap(p: &EnumerationPosterior, q: &EnumerationPosterior) -> f64 {
    let mut worst = ((p.log_gamma - q.log_gamma).exp() - 1.0).abs();
    for ((x, y), (gx, gy)) in p.noise_means.iter().zip(&q.noise_means).zip(p.big_gamma.iter().zip(&q.big_gamma)) {
        worst = worst.max(rel_diff(x, y));
        let scale = p.gamma.max(q.gamma).max(gx.norm()).max(gy.norm());
        if scale > 0.0 {
            worst = worst.max((gx - gy).norm() / scale);
        }
    }
    worst
}

/// Residual of `x_t - x*_t = Σ_s Π A B_s (û_s - u*_s)` summed literally.
pub fn divergence_attribution_error(spec: &SystemSpec, approx: &Trajectory, ideal: &Trajectory) -> f64 {
    let steps = approx.steps().min(ideal.steps());
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        let mut predicted = DVector::zeros(spec.state_dim);
        for s in 0..t {
            let du = &approx.actions[s] - &ideal.actions[s];
            predicted += spec.transition_product(s + 1, t) * matvec(&spec.b_seq[s], du.as_slice());
        }
        let (x, xs) = (&approx.states[t], &ideal.states[t]);
        let scale = 1f64.max(x.norm()).max(xs.norm());
        worst = worst.max(((x - xs) - predicted).norm() / scale);
    }
    worst
}

/// `M = √((d/m)(1 + 2√(ln β′/d) + 2 ln β′/d))`.
pub fn concentration_m(d: usize, m: f64, beta_prime: f64) -> f64 {
    let d = d as f64;
    let l = beta_prime.ln();
    ((d / m) * (1.0 + 2.0 * (l / d).sqrt() + 2.0 * l / d)).sqrt()
}

/// `(d+1) exp(-N β² γ_t / 3) + N exp(-β′)`.
pub fn concentration_failure_bound(d: usize, n: usize, beta: f64, beta_prime: f64, gamma: f64) -> f64 {
    let n = n as f64;
    (d as f64 + 1.0) * (-n * beta * beta * gamma / 3.0).exp() + n * (-beta_prime).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationParams {
    pub particles: usize,
    pub beta: f64,
    pub beta_prime: f64,
    pub replications: usize,
    /// Sub-Gaussian parameter of the transition noise.
    pub m: f64,
}

impl ConcentrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 0.5) {
            return Err(Error::InvalidParameter(format!("beta must lie in (0, 1/2], got {}", self.beta)));
        }
        if !(self.beta_prime > 1.0) {
            return Err(Error::InvalidParameter(format!("beta' must exceed 1, got {}", self.beta_prime)));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::InvalidParameter(format!("m must be positive, got {}", self.m)));
        }
        if self.particles == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationCell {
    pub t: usize,
    pub s: usize,
    pub gamma: f64,
    pub bound: f64,
    pub vacuous: bool,
    pub exceedances: usize,
    pub frequency: f64,
    /// Binomial standard deviation at the bound's probability.
    pub sigma: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub params: ConcentrationParams,
    pub m_constant: f64,
    pub threshold: f64,
    pub cells: Vec<ConcentrationCell>,
    /// Replications in which the ensemble died before the end of the record.
    pub deaths: usize,
    pub pass: bool,
}

/// Runs fresh ensembles on a fixed record and counts how often
/// `‖ξ̂_{t,s} - ξ̃_{t,s}‖ > 4βM`. A dead ensemble counts as an exceedance for
/// every remaining cell.
pub fn concentration_experiment(
    spec: &SystemSpec,
    observations: &[DVector<f64>],
    actions: &[DVector<f64>],
    params: ConcentrationParams,
    max_paths: usize,
    key: &StreamKey,
) -> Result<ConcentrationReport> {
    params.validate()?;
    let mut dag = EnumerationDag::new(spec, max_paths)?;
    let mut exact = vec![Vec::new()];
    let mut gammas = vec![1.0];
    for (u, o) in actions.iter().zip(observations) {
        dag.step(spec, u, o)?;
        let t = dag.time();
        exact.push(dag.noise_posterior(spec, t));
        gammas.push(dag.gamma(t));
    }
    let horizon = actions.len();
    let m_constant = concentration_m(spec.state_dim, params.m, params.beta_prime);
    let threshold = 4.0 * params.beta * m_constant;

    let counts: Vec<(Vec<Vec<usize>>, bool)> = (0..params.replications)
        .into_par_iter()
        .map(|r| {
            let rep_key = key.derive(Domain::Replication, r as u64);
            let mut hits: Vec<Vec<usize>> = (0..=horizon).map(|t| vec![0; t]).collect();
            let mut died = false;
            let options = FilterOptions {
                history: HistoryPolicy::Keep,
                record_noise_estimates: true,
            };
            match filter_record(spec, observations, actions, params.particles, &rep_key, options) {
                Ok(run) => {
                    for t in 1..=horizon {
                        for s in 0..t {
                            if (&run.noise_estimates[t][s] - &exact[t][s]).norm() > threshold {
                                hits[t][s] = 1;
                            }
                        }
                    }
                }
                Err(Error::ParticleDeath { t: dead }) => {
                    // Survive up to `dead - 1`; rerun prefix to score the live steps.
                    let prefix = dead.saturating_sub(1);
                    if let Ok(run) = filter_record(spec, &observations[..prefix], &actions[..prefix], params.particles, &rep_key, options) {
                        for t in 1..=prefix {
                            for s in 0..t {
                                if (&run.noise_estimates[t][s] - &exact[t][s]).norm() > threshold {
                                    hits[t][s] = 1;
                                }
                            }
                        }
                    }
                    for row in hits.iter_mut().skip(dead) {
                        row.iter_mut().for_each(|h| *h = 1);
                    }
                    died = true;
                }
                Err(_) => {
                    for row in hits.iter_mut().skip(1) {
                        row.iter_mut().for_each(|h| *h = 1);
                    }
                }
            }
            (hits, died)
        })
        .collect();

    let reps = params.replications as f64;
    let deaths = counts.iter().filter(|(_, died)| *died).count();
    let mut cells = Vec::new();
    for t in 1..=horizon {
        let bound = concentration_failure_bound(spec.state_dim, params.particles, params.beta, params.beta_prime, gammas[t]);
        let vacuous = bound >= 1.0;
        for s in 0..t {
            let exceedances: usize = counts.iter().map(|(h, _)| h[t][s]).sum();
            let frequency = exceedances as f64 / reps;
            let q = bound.min(1.0);
            let sigma = (q * (1.0 - q) / reps).sqrt();
            cells.push(ConcentrationCell {
                t,
                s,
                gamma: gammas[t],
                bound,
                vacuous,
                exceedances,
                frequency,
                sigma,
                pass: vacuous || frequency <= bound + 3.0 * sigma,
            });
        }
    }
    let pass = cells.iter().all(|c| c.pass);
    Ok(ConcentrationReport {
        params,
        m_constant,
        threshold,
        cells,
        deaths,
        pass,
    })
}

/// Constants of the stability assumptions, measured on a concrete system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionConstants {
    pub l_g: f64,
    pub c_a: f64,
    pub rho_a: f64,
    pub c_b: f64,
    /// Linear policies only.
    pub c_ab: Option<f64>,
    pub rho_ab: Option<f64>,
    pub c_bg: Option<f64>,
}

/// Smallest `C` with `‖Π_{t1..=t2} M_s‖ ≤ C ρ^{t2-t1}` for all `t1 ≤ t2 < T`.
fn growth_constant(mats: &[DMatrix<f64>], rho: f64) -> f64 {
    let mut c: f64 = 0.0;
    for t1 in 0..mats.len() {
        let mut prod = mats[t1].clone();
        c = c.max(op_norm(&prod));
        for (k, m) in mats.iter().enumerate().skip(t1 + 1) {
            prod = m * prod;
            c = c.max(op_norm(&prod) / rho.powi((k - t1) as i32));
        }
    }
    c
}

/// Measures the assumption constants for given decay rates.
pub fn estimate_assumption_constants(spec: &SystemSpec, policy: &Policy, rho_a: f64, rho_ab: f64) -> AssumptionConstants {
    let c_a = growth_constant(&spec.a_seq, rho_a);
    let c_b = spec.b_seq.iter().map(op_norm).fold(0.0, f64::max);
    let (c_ab, rho_ab, c_bg) = match policy.gain() {
        Some(g) => {
            let closed: Vec<_> = spec.a_seq.iter().zip(&spec.b_seq).map(|(a, b)| a + b * g).collect();
            let c_bg = spec.b_seq.iter().map(|b| op_norm(&(b * g))).fold(0.0, f64::max);
            (Some(growth_constant(&closed, rho_ab)), Some(rho_ab), Some(c_bg))
        }
        None => (None, None, None),
    };
    AssumptionConstants {
        l_g: policy.lipschitz_constant(),
        c_a,
        rho_a,
        c_b,
        c_ab,
        rho_ab,
        c_bg,
    }
}

/// `Σ_a^{(t)} = 1 + C_a Σ_{s=0}^{t-2} ρ_a^s`.
pub fn sigma_a(c_a: f64, rho_a: f64, t: usize) -> f64 {
    1.0 + c_a * geometric(rho_a, t.saturating_sub(1))
}

/// `Σ_ab^{(k)} = Σ_{s=0}^{k-1} c^s` with `c = C_a + C_b L_g`; `Σ_ab^{(0)} = 0`.
pub fn sigma_ab(c: f64, k: usize) -> f64 {
    geometric(c, k)
}

/// `Σ̄_ab^{(k)} = 1 + C_ab Σ_{s=0}^{k-2} ρ_ab^s`.
pub fn sigma_ab_bar(c_ab: f64, rho_ab: f64, k: usize) -> f64 {
    1.0 + c_ab * geometric(rho_ab, k.saturating_sub(1))
}

/// `Σ_{s=0}^{n-1} r^s`, summed term by term.
fn geometric(r: f64, n: usize) -> f64 {
    let mut total = 0.0;
    let mut term = 1.0;
    for _ in 0..n {
        total += term;
        term *= r;
    }
    total
}

/// `L_r L_g Σ_a (1 + C_b Σ_a)(1 + L_g C_b Σ_ab)`.
pub fn delta_nonlinear_from_sums(l_r: f64, l_g: f64, c_b: f64, sigma_a: f64, sigma_ab: f64) -> f64 {
    l_r * l_g * sigma_a * (1.0 + c_b * sigma_a) * (1.0 + l_g * c_b * sigma_ab)
}

/// `L_r L_g Σ_a (1 + C_b Σ_a)(1 + C_bg Σ̄_ab)`.
pub fn delta_linear_from_sums(l_r: f64, l_g: f64, c_b: f64, c_bg: f64, sigma_a: f64, sigma_ab_bar: f64) -> f64 {
    l_r * l_g * sigma_a * (1.0 + c_b * sigma_a) * (1.0 + c_bg * sigma_ab_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundVariant {
    Nonlinear,
    Linear,
}

impl BoundVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BoundVariant::Nonlinear => "nonlinear",
            BoundVariant::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub l_r: f64,
    pub l_g: f64,
    pub c_a: f64,
    pub rho_a: f64,
    pub c_b: f64,
    pub c_ab: f64,
    pub rho_ab: f64,
    pub c_bg: f64,
    pub subgaussian_m: f64,
    pub d: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub p: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L_r", self.l_r),
            ("L_g", self.l_g),
            ("C_a", self.c_a),
            ("rho_a", self.rho_a),
            ("C_b", self.c_b),
            ("C_ab", self.c_ab),
            ("rho_ab", self.rho_ab),
            ("C_bg", self.c_bg),
            ("m", self.subgaussian_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("T must be at least 1".into()));
        }
        if self.d < 1 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1/2), got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub sigma_a: f64,
    pub sigma_ab: f64,
    pub sigma_ab_bar: f64,
    pub delta_nonlinear: f64,
    pub delta_linear: f64,
    /// `T² Δ_T² d m⁻¹ ε⁻² p⁻¹` for the selected variant, without constants or logs.
    pub n_expression: f64,
    /// The logarithmic factor `ln(dT/δ)` hidden in the order notation.
    pub log_factor: f64,
    /// The stable-system expression for the selected variant.
    pub stable_n: f64,
}

pub fn bound_calculator(params: &BoundParams, variant: BoundVariant) -> Result<BoundReport> {
    params.validate()?;
    let t = params.horizon;
    let tf = t as f64;
    let s_a = sigma_a(params.c_a, params.rho_a, t);
    let s_ab = sigma_ab(params.c_a + params.c_b * params.l_g, t - 1);
    let s_ab_bar = sigma_ab_bar(params.c_ab, params.rho_ab, t - 1);
    let delta_nonlinear = delta_nonlinear_from_sums(params.l_r, params.l_g, params.c_b, s_a, s_ab);
    let delta_linear = delta_linear_from_sums(params.l_r, params.l_g, params.c_b, params.c_bg, s_a, s_ab_bar);
    let scale = params.d as f64 / params.subgaussian_m / (params.epsilon * params.epsilon) / params.p;
    let delta_t = match variant {
        BoundVariant::Nonlinear => delta_nonlinear,
        BoundVariant::Linear => delta_linear,
    };
    let lrlg2 = (params.l_r * params.l_g).powi(2);
    let stable_n = match variant {
        BoundVariant::Nonlinear => tf.powi(6) * scale * lrlg2 * (1.0 + params.c_b.powi(2) * tf * tf),
        BoundVariant::Linear => {
            let (ca2, cb2, cbg2) = (params.c_a.powi(2), params.c_b.powi(2), params.c_bg.powi(2));
            tf * tf
                * scale
                * lrlg2
                * (1.0 + ca2 * tf * tf)
                * (1.0 + cb2 + cb2 * ca2 * tf * tf)
                * (1.0 + cbg2 + cbg2 * params.c_ab.powi(2))
        }
    };
    Ok(BoundReport {
        variant,
        sigma_a: s_a,
        sigma_ab: s_ab,
        sigma_ab_bar: s_ab_bar,
        delta_nonlinear,
        delta_linear,
        n_expression: tf * tf * delta_t * delta_t * scale,
        log_factor: (params.d as f64 * tf / params.delta).ln(),
        stable_n,
    })
}

/// Envelope slack: relative `1e-9` plus absolute `1e-12`.
const ENVELOPE_REL_SLACK: f64 = 1e-9;
const ENVELOPE_ABS_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ActionGapReport {
    /// `‖û_t - u*_t‖`.
    pub gaps: Vec<f64>,
    /// Running `max_{t' ≤ t, s < t'} ‖ξ̂_{t',s} - ξ̃_{t',s}‖`.
    pub epsilon_hat: Vec<f64>,
    pub envelope_nonlinear: Vec<f64>,
    pub envelope_linear: Option<Vec<f64>>,
    /// Times at which a measured gap exceeds an applicable envelope.
    pub violations: Vec<usize>,
}

/// Measured action gaps of a coupled run against the accumulated-error
/// envelopes. The run must have recorded `ξ̂` and `ξ̃`.
pub fn action_gap_measure(run: &CoupledRun, constants: &AssumptionConstants) -> Result<ActionGapReport> {
    let gaps = run.action_gaps();
    if run.ideal_noise_means.is_empty() || (run.approx_noise_estimates.len() < gaps.len()) {
        return Err(Error::OracleNotApplicable(
            "action gap envelopes need recorded exact and particle noise estimates".into(),
        ));
    }
    let mut epsilon_hat = Vec::with_capacity(gaps.len());
    let mut running: f64 = 0.0;
    for t in 0..gaps.len() {
        for (a, b) in run.approx_noise_estimates[t].iter().zip(&run.ideal_noise_means[t]) {
            running = running.max((a - b).norm());
        }
        epsilon_hat.push(running);
    }
    let c = constants;
    let mut envelope_nonlinear = Vec::with_capacity(gaps.len());
    let mut envelope_linear = c.c_bg.map(|_| Vec::with_capacity(gaps.len()));
    for (t, &eps) in epsilon_hat.iter().enumerate() {
        if t == 0 {
            envelope_nonlinear.push(0.0);
            if let Some(v) = envelope_linear.as_mut() {
                v.push(0.0);
            }
            continue;
        }
        let s_a = sigma_a(c.c_a, c.rho_a, t);
        let s_ab = sigma_ab(c.c_a + c.c_b * c.l_g, t - 1);
        envelope_nonlinear.push(c.l_g * s_a * (1.0 + c.l_g * c.c_b * s_ab) * eps);
        if let (Some(v), Some(c_ab), Some(rho_ab), Some(c_bg)) = (envelope_linear.as_mut(), c.c_ab, c.rho_ab, c.c_bg) {
            let s_bar = sigma_ab_bar(c_ab, rho_ab, t - 1);
            v.push(c.l_g * s_a * (1.0 + c_bg * s_bar) * eps);
        }
    }
    let within = |gap: f64, env: f64| gap <= env * (1.0 + ENVELOPE_REL_SLACK) + ENVELOPE_ABS_SLACK;
    let violations = (0..gaps.len())
        .filter(|&t| {
            !within(gaps[t], envelope_nonlinear[t]) || envelope_linear.as_ref().is_some_and(|v| !within(gaps[t], v[t]))
        })
        .collect();
    Ok(ActionGapReport {
        gaps,
        epsilon_hat,
        envelope_nonlinear,
        envelope_linear,
        violations,
    })
}
