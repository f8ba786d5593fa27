//! Partially observed linear dynamical systems, policies, rewards, and the
//! ground-truth environment.
//!
//! The state evolves as `x_{t+1} = A_t x_t + B_t u_t + ξ_t` for `t = 0..T-1`
//! and is observed as `o_t = C_t x_t + ζ_t` for `t = 1..T`. `C_seq[t-1]` and
//! `obs_noise_seq[t-1]` belong to observation time `t`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{affine_step_into, l1_norm, matvec, op_norm};
use crate::noise::{NoiseDistribution, NoiseKind};
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub horizon: usize,
    pub a_seq: Vec<DMatrix<f64>>,
    pub b_seq: Vec<DMatrix<f64>>,
    pub c_seq: Vec<DMatrix<f64>>,
    pub transition_noise_seq: Vec<NoiseDistribution>,
    pub obs_noise_seq: Vec<NoiseDistribution>,
    pub x0: DVector<f64>,
}

/// List of problems found by [`validate_spec`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "valid")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

impl SystemSpec {
    /// Repeats one set of matrices and noise laws over the horizon.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        transition_noise: NoiseDistribution,
        obs_noise: NoiseDistribution,
        x0: DVector<f64>,
        horizon: usize,
    ) -> Self {
        SystemSpec {
            state_dim: a.nrows(),
            action_dim: b.ncols(),
            obs_dim: c.nrows(),
            horizon,
            a_seq: vec![a; horizon],
            b_seq: vec![b; horizon],
            c_seq: vec![c; horizon],
            transition_noise_seq: vec![transition_noise; horizon],
            obs_noise_seq: vec![obs_noise; horizon],
            x0,
        }
    }

    /// Scalar time-invariant system.
    pub fn scalar(
        a: f64,
        b: f64,
        c: f64,
        transition_noise: NoiseDistribution,
        obs_noise: NoiseDistribution,
        x0: f64,
        horizon: usize,
    ) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::time_invariant(m(a), m(b), m(c), transition_noise, obs_noise, DVector::from_element(1, x0), horizon)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_spec(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(report))
        }
    }

    /// Same system truncated to a shorter horizon.
    pub fn truncated(&self, horizon: usize) -> Self {
        let h = horizon.min(self.horizon);
        SystemSpec {
            horizon: h,
            a_seq: self.a_seq[..h].to_vec(),
            b_seq: self.b_seq[..h].to_vec(),
            c_seq: self.c_seq[..h].to_vec(),
            transition_noise_seq: self.transition_noise_seq[..h].to_vec(),
            obs_noise_seq: self.obs_noise_seq[..h].to_vec(),
            ..self.clone()
        }
    }

    /// True when every observation law is atomic, so weights are masses.
    pub fn atomic_observations(&self) -> bool {
        self.obs_noise_seq.iter().all(|n| n.kind() == NoiseKind::Atomic)
    }

    /// `Π_{s'=from}^{to-1} A_{s'}` with later factors on the left; identity when `from >= to`.
    pub fn transition_product(&self, from: usize, to: usize) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.state_dim, self.state_dim);
        for s in from..to {
            p = &self.a_seq[s] * p;
        }
        p
    }
}

pub fn validate_spec(spec: &SystemSpec) -> ValidationReport {
    let mut v = Vec::new();
    let (d, k, m, t) = (spec.state_dim, spec.action_dim, spec.obs_dim, spec.horizon);
    if d == 0 {
        v.push("state_dim must be positive".to_string());
    }
    if k == 0 {
        v.push("action_dim must be positive".to_string());
    }
    if m == 0 {
        v.push("obs_dim must be positive".to_string());
    }
    if t == 0 {
        v.push("horizon must be positive".to_string());
    }
    let check_seq = |name: &str, seq: &[DMatrix<f64>], rows: usize, cols: usize, v: &mut Vec<String>| {
        if seq.len() != t {
            v.push(format!("{name}_seq length: expected {t}, got {}", seq.len()));
        }
        for (i, mat) in seq.iter().enumerate() {
            if mat.shape() != (rows, cols) {
                v.push(format!(
                    "{name}_{i} shape: expected {rows}x{cols}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                ));
            }
            if mat.iter().any(|x| !x.is_finite()) {
                v.push(format!("{name}_{i} has non-finite entries"));
            }
        }
    };
    check_seq("A", &spec.a_seq, d, d, &mut v);
    check_seq("B", &spec.b_seq, d, k, &mut v);
    check_seq("C", &spec.c_seq, m, d, &mut v);
    let check_noise = |name: &str, seq: &[NoiseDistribution], dim: usize, v: &mut Vec<String>| {
        if seq.len() != t {
            v.push(format!("{name}_seq length: expected {t}, got {}", seq.len()));
        }
        for (i, n) in seq.iter().enumerate() {
            if n.dim() != dim {
                v.push(format!("{name}_{i} dimension: expected {dim}, got {}", n.dim()));
            }
        }
    };
    check_noise("transition_noise", &spec.transition_noise_seq, d, &mut v);
    check_noise("obs_noise", &spec.obs_noise_seq, m, &mut v);
    if spec.x0.len() != d {
        v.push(format!("x0 length: expected {d}, got {}", spec.x0.len()));
    }
    if spec.x0.iter().any(|x| !x.is_finite()) {
        v.push("x0 has non-finite entries".to_string());
    }
    ValidationReport { violations: v }
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected,
            got,
        })
    }
}

/// `A_t x + B_t u + ξ`.
pub fn step_state(spec: &SystemSpec, t: usize, x: &DVector<f64>, u: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
    if t >= spec.horizon || t >= spec.a_seq.len() || t >= spec.b_seq.len() {
        return Err(Error::TimeOutOfRange { t, horizon: spec.horizon });
    }
    check_dim("state", spec.state_dim, x.len())?;
    check_dim("action", spec.action_dim, u.len())?;
    check_dim("transition noise", spec.state_dim, xi.len())?;
    let bu = matvec(&spec.b_seq[t], u.as_slice());
    let mut out = DVector::zeros(spec.state_dim);
    affine_step_into(&spec.a_seq[t], x.as_slice(), bu.as_slice(), xi.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// `C_t x + ζ` for observation time `1 ≤ t ≤ T`.
pub fn observe(spec: &SystemSpec, t: usize, x: &DVector<f64>, zeta: &DVector<f64>) -> Result<DVector<f64>> {
    if t == 0 || t > spec.horizon || t > spec.c_seq.len() {
        return Err(Error::TimeOutOfRange { t, horizon: spec.horizon });
    }
    check_dim("state", spec.state_dim, x.len())?;
    check_dim("observation noise", spec.obs_dim, zeta.len())?;
    let mut out = matvec(&spec.c_seq[t - 1], x.as_slice());
    out += zeta;
    Ok(out)
}

type PolicyMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// State-feedback policy `u = g(y)`.
#[derive(Clone)]
pub enum Policy {
    Linear { gain: DMatrix<f64>, lipschitz: f64 },
    Lipschitz { map: PolicyMap, lipschitz: f64, action_dim: usize, label: String },
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Linear { gain, lipschitz } => f
                .debug_struct("Linear")
                .field("gain", gain)
                .field("lipschitz", lipschitz)
                .finish(),
            Policy::Lipschitz { lipschitz, action_dim, label, .. } => f
                .debug_struct("Lipschitz")
                .field("label", label)
                .field("lipschitz", lipschitz)
                .field("action_dim", action_dim)
                .finish(),
        }
    }
}

impl Policy {
    /// `g(y) = G y` with `L_g = ‖G‖_op`.
    pub fn linear(gain: DMatrix<f64>) -> Self {
        let lipschitz = op_norm(&gain);
        Policy::Linear { gain, lipschitz }
    }

    /// Linear policy with a declared constant, which must dominate `‖G‖_op`.
    pub fn linear_with_constant(gain: DMatrix<f64>, lipschitz: f64) -> Result<Self> {
        if gain.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("policy gain has non-finite entries".into()));
        }
        let norm = op_norm(&gain);
        if lipschitz < norm * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "declared L_g = {lipschitz} is below ‖G‖_op = {norm}"
            )));
        }
        Ok(Policy::Linear { gain, lipschitz })
    }

    /// Arbitrary map with a caller-asserted Lipschitz constant.
    pub fn lipschitz<F>(map: F, lipschitz: f64, action_dim: usize, label: &str) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if !(lipschitz > 0.0) {
            return Err(Error::InvalidParameter("L_g must be positive".into()));
        }
        Ok(Policy::Lipschitz {
            map: Arc::new(map),
            lipschitz,
            action_dim,
            label: label.to_string(),
        })
    }

    /// `clamp(G y, -limit, limit)` coordinate-wise; box projection is
    /// 1-Lipschitz, so `L_g = ‖G‖_op`.
    pub fn saturated_linear(gain: DMatrix<f64>, limit: f64) -> Result<Self> {
        let l = op_norm(&gain).max(f64::MIN_POSITIVE);
        let k = gain.nrows();
        Self::lipschitz(
            move |y| matvec(&gain, y.as_slice()).map(|v| v.clamp(-limit, limit)),
            l,
            k,
            "saturated_linear",
        )
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Policy::Linear { gain, .. } => matvec(gain, y.as_slice()),
            Policy::Lipschitz { map, .. } => map(y),
        }
    }

    pub fn lipschitz_constant(&self) -> f64 {
        match self {
            Policy::Linear { lipschitz, .. } | Policy::Lipschitz { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Linear { gain, .. } => gain.nrows(),
            Policy::Lipschitz { action_dim, .. } => *action_dim,
        }
    }

    pub fn gain(&self) -> Option<&DMatrix<f64>> {
        match self {
            Policy::Linear { gain, .. } => Some(gain),
            Policy::Lipschitz { .. } => None,
        }
    }
}

type RewardMap = Arc<dyn Fn(&[DVector<f64>], &[DVector<f64>]) -> f64 + Send + Sync>;

/// Terminal reward `r_T(x_{1:T}, u_{0:T-1})`.
#[derive(Clone)]
pub enum RewardFunction {
    /// `Σ_t ‖x_t‖_1 / T`; a regret, lower is better.
    AvgL1,
    /// `L_r (Σ ‖x_t‖ + Σ ‖u_t‖)`.
    SumNorm { lipschitz: f64 },
    Custom { map: RewardMap, lipschitz: f64 },
}

impl fmt::Debug for RewardFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardFunction::AvgL1 => write!(f, "AvgL1"),
            RewardFunction::SumNorm { lipschitz } => write!(f, "SumNorm({lipschitz})"),
            RewardFunction::Custom { lipschitz, .. } => write!(f, "Custom({lipschitz})"),
        }
    }
}

impl RewardFunction {
    /// Lipschitz constant for state dimension `d` and horizon `T`.
    pub fn lipschitz_constant(&self, state_dim: usize, horizon: usize) -> f64 {
        match self {
            RewardFunction::AvgL1 => (state_dim as f64).sqrt() / horizon as f64,
            RewardFunction::SumNorm { lipschitz } | RewardFunction::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

pub fn evaluate_reward(r: &RewardFunction, states: &[DVector<f64>], actions: &[DVector<f64>]) -> Result<f64> {
    if states.len() != actions.len() {
        return Err(Error::LengthMismatch {
            what: "actions vs states".into(),
            expected: states.len(),
            got: actions.len(),
        });
    }
    if states.is_empty() {
        return Err(Error::InvalidParameter("reward needs at least one step".into()));
    }
    Ok(match r {
        RewardFunction::AvgL1 => states.iter().map(l1_norm).sum::<f64>() / states.len() as f64,
        RewardFunction::SumNorm { lipschitz } => {
            lipschitz * (states.iter().map(|x| x.norm()).sum::<f64>() + actions.iter().map(|u| u.norm()).sum::<f64>())
        }
        RewardFunction::Custom { map, .. } => map(states, actions),
    })
}

/// One realized run. `states[0]` is `x0`; `observations[t-1]` is `o_t`;
/// `obs_noises[t-1]` is `ζ_t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub transition_noises: Vec<DVector<f64>>,
    pub obs_noises: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>) -> Self {
        Trajectory {
            states: vec![x0],
            ..Default::default()
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.actions.len().min(self.states.len().saturating_sub(1))
    }

    /// Replays `(x0, actions, ξ)` through [`step_state`].
    pub fn replay_states(&self, spec: &SystemSpec) -> Result<Vec<DVector<f64>>> {
        let mut out = vec![self.states[0].clone()];
        for t in 0..self.steps() {
            let next = step_state(spec, t, &out[t], &self.actions[t], &self.transition_noises[t])?;
            out.push(next);
        }
        Ok(out)
    }

    /// Replays `(states, ζ)` through [`observe`].
    pub fn replay_observations(&self, spec: &SystemSpec) -> Result<Vec<DVector<f64>>> {
        (1..=self.observations.len())
            .map(|t| observe(spec, t, &self.states[t], &self.obs_noises[t - 1]))
            .collect()
    }

    pub fn reward(&self, r: &RewardFunction) -> Result<f64> {
        let n = self.steps();
        evaluate_reward(r, &self.states[1..=n], &self.actions[..n])
    }
}

/// Source of the true noise realizations `(ξ_t, ζ_{t+1})`.
pub trait NoiseSource {
    fn draw(&mut self, spec: &SystemSpec, t: usize) -> Result<(DVector<f64>, DVector<f64>)>;
}

/// Draws from the model laws; step `t` uses stream `t` of the key.
#[derive(Debug, Clone)]
pub struct SampledNoise {
    key: StreamKey,
}

impl SampledNoise {
    pub fn new(key: StreamKey) -> Self {
        SampledNoise { key }
    }
}

impl NoiseSource for SampledNoise {
    fn draw(&mut self, spec: &SystemSpec, t: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut rng = self.key.stream(t as u64);
        let xi = spec.transition_noise_seq[t].sample(&mut rng);
        let zeta = spec.obs_noise_seq[t].sample(&mut rng);
        Ok((xi, zeta))
    }
}

/// Replays fixed realizations; `obs_noises[t]` is `ζ_{t+1}`.
#[derive(Debug, Clone)]
pub struct ScriptedNoise {
    pub transition_noises: Vec<DVector<f64>>,
    pub obs_noises: Vec<DVector<f64>>,
}

impl NoiseSource for ScriptedNoise {
    fn draw(&mut self, _spec: &SystemSpec, t: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        match (self.transition_noises.get(t), self.obs_noises.get(t)) {
            (Some(xi), Some(zeta)) => Ok((xi.clone(), zeta.clone())),
            _ => Err(Error::LengthMismatch {
                what: "scripted noise".into(),
                expected: t + 1,
                got: self.transition_noises.len().min(self.obs_noises.len()),
            }),
        }
    }
}

/// Draws a full horizon of shared realizations from the model laws.
pub fn draw_noise_path(spec: &SystemSpec, key: StreamKey) -> Result<ScriptedNoise> {
    let mut src = SampledNoise::new(key);
    let mut xs = Vec::with_capacity(spec.horizon);
    let mut zs = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let (xi, zeta) = src.draw(spec, t)?;
        xs.push(xi);
        zs.push(zeta);
    }
    Ok(ScriptedNoise {
        transition_noises: xs,
        obs_noises: zs,
    })
}

/// The real process: applies actions, emits observations, records everything.
pub struct Environment<'a, S: NoiseSource> {
    spec: &'a SystemSpec,
    source: S,
    trajectory: Trajectory,
}

impl<'a, S: NoiseSource> Environment<'a, S> {
    pub fn new(spec: &'a SystemSpec, source: S) -> Self {
        Environment {
            spec,
            source,
            trajectory: Trajectory::new(spec.x0.clone()),
        }
    }

    pub fn time(&self) -> usize {
        self.trajectory.states.len() - 1
    }

    pub fn state(&self) -> &DVector<f64> {
        self.trajectory.states.last().expect("x0 is always present")
    }

    /// Applies `u_t` and returns `o_{t+1}`.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let t = self.time();
        let (xi, zeta) = self.source.draw(self.spec, t)?;
        let next = step_state(self.spec, t, self.state(), u, &xi)?;
        let obs = observe(self.spec, t + 1, &next, &zeta)?;
        let tr = &mut self.trajectory;
        tr.states.push(next);
        tr.actions.push(u.clone());
        tr.observations.push(obs.clone());
        tr.transition_noises.push(xi);
        tr.obs_noises.push(zeta);
        Ok(obs)
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }
}
