//! Exact (or reference) posterior means for the ideal process.
//!
//! All oracles advance incrementally through [`PosteriorTracker`], which the
//! coupled runner drives one step at a time; the batch functions wrap it.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{affine_step_into, matvec, residual_into};
use crate::noise::NoiseLaw;
use crate::pf::{HistoryPolicy, ParticleEnsemble};
use crate::rng::StreamKey;
use crate::model::SystemSpec;

pub const DEFAULT_MAX_PATHS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    KalmanGaussian,
    /// Exact enumeration; `max_paths` bounds the live merged paths per step.
    EnumerationFiniteSupport { max_paths: usize },
    ReferenceFilter { particles: usize },
}

impl OracleKind {
    /// Kalman when every law is Gaussian, enumeration when transition noise
    /// is atomic, otherwise a reference filter with `10^5` particles.
    pub fn auto(spec: &SystemSpec) -> Self {
        let gaussian = spec.transition_noise_seq.iter().chain(&spec.obs_noise_seq).all(|n| n.as_gaussian().is_some());
        if gaussian {
            OracleKind::KalmanGaussian
        } else if spec.transition_noise_seq.iter().all(|n| n.atoms().is_some()) {
            OracleKind::EnumerationFiniteSupport { max_paths: DEFAULT_MAX_PATHS }
        } else {
            OracleKind::ReferenceFilter { particles: 100_000 }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OracleKind::KalmanGaussian => "kalman",
            OracleKind::EnumerationFiniteSupport { .. } => "enumeration",
            OracleKind::ReferenceFilter { .. } => "reference",
        }
    }
}

fn check_record(spec: &SystemSpec, observations: &[DVector<f64>], actions: &[DVector<f64>]) -> Result<()> {
    if observations.len() != actions.len() {
        return Err(Error::LengthMismatch {
            what: "observations vs actions".into(),
            expected: actions.len(),
            got: observations.len(),
        });
    }
    if actions.len() > spec.horizon {
        return Err(Error::TimeOutOfRange {
            t: actions.len(),
            horizon: spec.horizon,
        });
    }
    Ok(())
}

fn check_step(spec: &SystemSpec, t: usize, u: &DVector<f64>, o: &DVector<f64>) -> Result<()> {
    if t >= spec.horizon {
        return Err(Error::TimeOutOfRange { t, horizon: spec.horizon });
    }
    if u.len() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "action".into(),
            expected: spec.action_dim,
            got: u.len(),
        });
    }
    if o.len() != spec.obs_dim {
        return Err(Error::DimensionMismatch {
            what: "observation".into(),
            expected: spec.obs_dim,
            got: o.len(),
        });
    }
    Ok(())
}

/// Gaussian filtering recursion.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    time: usize,
}

impl KalmanFilter {
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        for (t, (mu, eta)) in spec.transition_noise_seq.iter().zip(&spec.obs_noise_seq).enumerate() {
            if mu.as_gaussian().is_none() {
                return Err(Error::NonGaussianNoise { which: "transition noise", t });
            }
            if eta.as_gaussian().is_none() {
                return Err(Error::NonGaussianNoise {
                    which: "observation noise",
                    t: t + 1,
                });
            }
        }
        let d = spec.state_dim;
        Ok(KalmanFilter {
            mean: spec.x0.clone(),
            cov: DMatrix::zeros(d, d),
            time: 0,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn step(&mut self, spec: &SystemSpec, u: &DVector<f64>, o: &DVector<f64>) -> Result<()> {
        let t = self.time;
        check_step(spec, t, u, o)?;
        let (q_mean, q_var) = spec.transition_noise_seq[t].as_gaussian().expect("checked at construction");
        let (r_mean, r_var) = spec.obs_noise_seq[t].as_gaussian().expect("checked at construction");
        let a = &spec.a_seq[t];
        let c = &spec.c_seq[t];
        let bu = matvec(&spec.b_seq[t], u.as_slice());
        let mut pred = DVector::zeros(spec.state_dim);
        affine_step_into(a, self.mean.as_slice(), bu.as_slice(), q_mean.as_slice(), pred.as_mut_slice());
        let p_pred = a * &self.cov * a.transpose() + DMatrix::from_diagonal(&q_var);

        let mut innovation = DVector::zeros(spec.obs_dim);
        residual_into(c, pred.as_slice(), o.as_slice(), innovation.as_mut_slice());
        innovation -= r_mean;
        let pct = &p_pred * c.transpose();
        let cpc = c * &pct;
        if cpc.iter().all(|&v| v == 0.0) {
            // Nothing uncertain is observed; the update has zero gain.
            if r_var.iter().all(|&v| v == 0.0) && innovation.iter().any(|&v| v != 0.0) {
                return Err(Error::ImpossibleObservation { t: t + 1 });
            }
            self.mean = pred;
            self.cov = p_pred;
        } else {
            let s = cpc + DMatrix::from_diagonal(&r_var);
            let chol = s.cholesky().ok_or(Error::SingularInnovation { t: t + 1 })?;
            let gain = chol.solve(&pct.transpose()).transpose();
            self.mean = pred + &gain * innovation;
            let ikc = DMatrix::identity(spec.state_dim, spec.state_dim) - &gain * c;
            // Joseph form keeps the covariance symmetric positive semidefinite.
            self.cov = &ikc * p_pred * ikc.transpose() + &gain * DMatrix::from_diagonal(&r_var) * gain.transpose();
        }
        self.time += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Posterior mean and covariance after the last observation in the record.
pub fn kalman_posterior_mean(spec: &SystemSpec, observations: &[DVector<f64>], actions: &[DVector<f64>]) -> Result<KalmanPosterior> {
    check_record(spec, observations, actions)?;
    let mut kf = KalmanFilter::new(spec)?;
    for (u, o) in actions.iter().zip(observations) {
        kf.step(spec, u, o)?;
    }
    Ok(KalmanPosterior {
        mean: kf.mean,
        covariance: kf.cov,
    })
}

#[derive(Debug, Clone)]
struct Edge {
    parent: usize,
    child: usize,
    atom: usize,
    weight: f64,
}

/// Forward sums `alpha · 2^exp2`, rescaled by powers of two so that the
/// arithmetic stays exact on dyadic instances.
#[derive(Debug, Clone)]
struct Layer {
    /// Deterministic part `Π A x0 + Σ Π A B u`, shared by every node.
    drift: DVector<f64>,
    /// Noise-driven part `z` of each node; the state is `drift + z`.
    offsets: Vec<DVector<f64>>,
    alpha: Vec<f64>,
    exp2: i64,
}

fn rescale(values: &mut [f64]) -> i64 {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 || !max.is_finite() {
        return 0;
    }
    let e = max.log2().floor() as i64;
    let e = e.clamp(-1000, 1000);
    let f = 2f64.powi(-e as i32);
    for v in values.iter_mut() {
        *v *= f;
    }
    e
}

/// Exact posterior over finite-support noise paths.
///
/// Paths that reach the same state are merged (their futures coincide), so
/// the cost is governed by the number of distinct reachable states per step
/// rather than the number of paths. Nodes are keyed by the noise-driven part
/// of the state alone, which is computed exactly for integer dynamics and
/// lattice noise whatever the actions are.
#[derive(Debug, Clone)]
pub struct EnumerationDag {
    layers: Vec<Layer>,
    edges: Vec<Vec<Edge>>,
    actions: Vec<DVector<f64>>,
    max_paths: usize,
}

fn state_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

impl EnumerationDag {
    pub fn new(spec: &SystemSpec, max_paths: usize) -> Result<Self> {
        for (t, mu) in spec.transition_noise_seq.iter().enumerate() {
            if mu.atoms().is_none() {
                return Err(Error::OracleNotApplicable(format!(
                    "enumeration needs finite-support transition noise (t={t})"
                )));
            }
        }
        Ok(EnumerationDag {
            layers: vec![Layer {
                drift: spec.x0.clone(),
                offsets: vec![DVector::zeros(spec.state_dim)],
                alpha: vec![1.0],
                exp2: 0,
            }],
            edges: Vec::new(),
            actions: Vec::new(),
            max_paths,
        })
    }

    pub fn time(&self) -> usize {
        self.edges.len()
    }

    /// Number of merged states alive at `t`.
    pub fn width(&self, t: usize) -> usize {
        self.layers[t].offsets.len()
    }

    pub fn step(&mut self, spec: &SystemSpec, u: &DVector<f64>, o: &DVector<f64>) -> Result<()> {
        let t = self.time();
        check_step(spec, t, u, o)?;
        let atoms = match spec.transition_noise_seq[t].law() {
            NoiseLaw::FiniteSupport(atoms) => atoms,
            _ => unreachable!("checked at construction"),
        };
        let eta = &spec.obs_noise_seq[t];
        let a = &spec.a_seq[t];
        let c = &spec.c_seq[t];
        let bu = matvec(&spec.b_seq[t], u.as_slice());
        let parent = &self.layers[t];
        let zero = vec![0.0; spec.state_dim];
        let mut drift = DVector::zeros(spec.state_dim);
        affine_step_into(a, parent.drift.as_slice(), bu.as_slice(), &zero, drift.as_mut_slice());

        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut offsets = Vec::new();
        let mut alpha: Vec<f64> = Vec::new();
        let mut edges = Vec::new();
        let mut next = vec![0.0; spec.state_dim];
        let mut state = vec![0.0; spec.state_dim];
        let mut residual = vec![0.0; spec.obs_dim];
        for (p, z) in parent.offsets.iter().enumerate() {
            for (j, (xi, mass)) in atoms.iter().enumerate() {
                affine_step_into(a, z.as_slice(), &zero, xi.as_slice(), &mut next);
                for (k, x) in state.iter_mut().enumerate() {
                    *x = drift[k] + next[k];
                }
                residual_into(c, &state, o.as_slice(), &mut residual);
                let weight = mass * eta.density(&residual);
                if weight == 0.0 {
                    continue;
                }
                let child = *index.entry(state_key(&next)).or_insert_with(|| {
                    offsets.push(DVector::from_column_slice(&next));
                    alpha.push(0.0);
                    offsets.len() - 1
                });
                alpha[child] += parent.alpha[p] * weight;
                edges.push(Edge {
                    parent: p,
                    child,
                    atom: j,
                    weight,
                });
            }
            if offsets.len() > self.max_paths {
                return Err(Error::PathBudgetExceeded {
                    t: t + 1,
                    needed: offsets.len(),
                    budget: self.max_paths,
                });
            }
        }
        if offsets.is_empty() {
            return Err(Error::ImpossibleObservation { t: t + 1 });
        }
        let exp2 = parent.exp2 + rescale(&mut alpha);
        self.layers.push(Layer {
            drift,
            offsets,
            alpha,
            exp2,
        });
        self.edges.push(edges);
        self.actions.push(u.clone());
        Ok(())
    }

    /// `log γ_t`, the log marginal likelihood of `o_{1:t}`.
    pub fn log_gamma(&self, t: usize) -> f64 {
        let layer = &self.layers[t];
        layer.alpha.iter().sum::<f64>().ln() + layer.exp2 as f64 * std::f64::consts::LN_2
    }

    /// `γ_t`; underflows to 0 only when the true value is below `f64` range.
    pub fn gamma(&self, t: usize) -> f64 {
        let layer = &self.layers[t];
        let total: f64 = layer.alpha.iter().sum();
        let e = layer.exp2.clamp(-2000, 2000) as i32;
        // Split the exponent so neither factor overflows on its own.
        total * 2f64.powi(e / 2) * 2f64.powi(e - e / 2)
    }

    /// `ỹ_t` as the filtering mean over merged states.
    pub fn filtering_mean(&self, t: usize) -> DVector<f64> {
        let layer = &self.layers[t];
        let total: f64 = layer.alpha.iter().sum();
        let mut mean = DVector::zeros(layer.drift.len());
        for (z, w) in layer.offsets.iter().zip(&layer.alpha) {
            mean.axpy(w / total, z, 1.0);
        }
        &layer.drift + mean
    }

    /// `ξ̃_{t,s}` for `s < t`: posterior means of the noise given `o_{1:t}`.
    pub fn noise_posterior(&self, spec: &SystemSpec, t: usize) -> Vec<DVector<f64>> {
        let d = spec.state_dim;
        let mut beta = vec![1.0; self.layers[t].offsets.len()];
        let mut out = vec![DVector::zeros(d); t];
        for s in (0..t).rev() {
            let points = spec.transition_noise_seq[s].atoms().expect("checked at construction").points();
            let alpha = &self.layers[s].alpha;
            let mut next_beta = vec![0.0; alpha.len()];
            let mut acc = DVector::zeros(d);
            let mut total = 0.0;
            for e in &self.edges[s] {
                let tail = e.weight * beta[e.child];
                if tail == 0.0 {
                    continue;
                }
                next_beta[e.parent] += tail;
                let post = alpha[e.parent] * tail;
                total += post;
                acc.axpy(post, &points[e.atom], 1.0);
            }
            out[s] = acc / total;
            rescale(&mut next_beta);
            beta = next_beta;
        }
        out
    }

    /// Full exact summary at `t`.
    pub fn posterior(&self, spec: &SystemSpec, t: usize) -> EnumerationPosterior {
        let noise_means = self.noise_posterior(spec, t);
        let mean = reconstruct(spec, &noise_means, &self.actions[..t]);
        let gamma = self.gamma(t);
        let big_gamma = noise_means.iter().map(|m| m * gamma).collect();
        EnumerationPosterior {
            mean,
            noise_means,
            log_gamma: self.log_gamma(t),
            gamma,
            big_gamma,
        }
    }
}

/// `Σ_s Π A (ξ_s + B_s u_s) + Π A x0` over the given noise and action prefix.
pub fn reconstruct(spec: &SystemSpec, noises: &[DVector<f64>], actions: &[DVector<f64>]) -> DVector<f64> {
    let t = noises.len();
    let mut x = spec.transition_product(0, t) * &spec.x0;
    for s in 0..t {
        let drive = &noises[s] + matvec(&spec.b_seq[s], actions[s].as_slice());
        x += spec.transition_product(s + 1, t) * drive;
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationPosterior {
    /// `ỹ_t`.
    pub mean: DVector<f64>,
    /// `ξ̃_{t,s}` for `s < t`.
    pub noise_means: Vec<DVector<f64>>,
    pub log_gamma: f64,
    /// `γ_t`; may underflow to 0 for long records, `log_gamma` does not.
    pub gamma: f64,
    /// `Γ_{t,s} = γ_t ξ̃_{t,s}`.
    pub big_gamma: Vec<DVector<f64>>,
}

pub fn enumerate_posterior_mean(
    spec: &SystemSpec,
    observations: &[DVector<f64>],
    actions: &[DVector<f64>],
    max_paths: usize,
) -> Result<EnumerationPosterior> {
    check_record(spec, observations, actions)?;
    let mut dag = EnumerationDag::new(spec, max_paths)?;
    for (u, o) in actions.iter().zip(observations) {
        dag.step(spec, u, o)?;
    }
    Ok(dag.posterior(spec, actions.len()))
}

/// `γ_1..γ_t` for the record; an unreachable observation yields zeros from
/// that step on.
pub fn likelihood_gamma(spec: &SystemSpec, observations: &[DVector<f64>], actions: &[DVector<f64>]) -> Result<Vec<f64>> {
    check_record(spec, observations, actions)?;
    let mut dag = EnumerationDag::new(spec, DEFAULT_MAX_PATHS)?;
    let mut out = Vec::with_capacity(actions.len());
    for (u, o) in actions.iter().zip(observations) {
        match dag.step(spec, u, o) {
            Ok(()) => out.push(dag.gamma(dag.time())),
            Err(Error::ImpossibleObservation { .. }) => {
                out.resize(actions.len(), 0.0);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Approximate posterior mean from a large particle filter on the record.
pub fn reference_filter_mean(
    spec: &SystemSpec,
    observations: &[DVector<f64>],
    actions: &[DVector<f64>],
    particles: usize,
    key: &StreamKey,
) -> Result<DVector<f64>> {
    check_record(spec, observations, actions)?;
    let mut ens = ParticleEnsemble::new(spec, particles, HistoryPolicy::Drop)?;
    for (u, o) in actions.iter().zip(observations) {
        ens.step(spec, u, o, key)?;
    }
    ens.estimate_state()
}

/// Incremental oracle used by the ideal planner.
#[derive(Debug, Clone)]
pub enum PosteriorTracker {
    Kalman(KalmanFilter),
    Enumeration(Box<EnumerationDag>),
    Reference { ensemble: ParticleEnsemble, key: StreamKey },
}

impl PosteriorTracker {
    pub fn new(spec: &SystemSpec, kind: OracleKind, key: &StreamKey) -> Result<Self> {
        Ok(match kind {
            OracleKind::KalmanGaussian => PosteriorTracker::Kalman(KalmanFilter::new(spec)?),
            OracleKind::EnumerationFiniteSupport { max_paths } => {
                PosteriorTracker::Enumeration(Box::new(EnumerationDag::new(spec, max_paths)?))
            }
            OracleKind::ReferenceFilter { particles } => PosteriorTracker::Reference {
                ensemble: ParticleEnsemble::new(spec, particles, HistoryPolicy::Drop)?,
                key: key.clone(),
            },
        })
    }

    pub fn time(&self) -> usize {
        match self {
            PosteriorTracker::Kalman(k) => k.time(),
            PosteriorTracker::Enumeration(e) => e.time(),
            PosteriorTracker::Reference { ensemble, .. } => ensemble.time(),
        }
    }

    /// `ỹ_t` at the current time.
    pub fn mean(&self, spec: &SystemSpec) -> Result<DVector<f64>> {
        match self {
            PosteriorTracker::Kalman(k) => Ok(k.mean().clone()),
            PosteriorTracker::Enumeration(e) => Ok(e.posterior(spec, e.time()).mean),
            PosteriorTracker::Reference { ensemble, .. } => ensemble.estimate_state(),
        }
    }

    /// `ξ̃_{t,0:t-1}`, available for enumeration only.
    pub fn noise_means(&self, spec: &SystemSpec) -> Option<Vec<DVector<f64>>> {
        match self {
            PosteriorTracker::Enumeration(e) => Some(e.noise_posterior(spec, e.time())),
            _ => None,
        }
    }

    pub fn dag(&self) -> Option<&EnumerationDag> {
        match self {
            PosteriorTracker::Enumeration(e) => Some(e),
            _ => None,
        }
    }

    pub fn step(&mut self, spec: &SystemSpec, u: &DVector<f64>, o: &DVector<f64>) -> Result<()> {
        match self {
            PosteriorTracker::Kalman(k) => k.step(spec, u, o),
            PosteriorTracker::Enumeration(e) => e.step(spec, u, o),
            PosteriorTracker::Reference { ensemble, key } => ensemble.step(spec, u, o, key),
        }
    }
}
