//! Run configuration files.
//!
//! Configs are TOML: `key = value` pairs under `[section]` headers. Matrices
//! are written row-major as arrays of rows, `A = [[0.9, 0.1], [0.0, 0.8]]`.
//!
//! ```toml
//! [system]
//! horizon = 40
//! x0 = [0.0]
//! A = [[1.0]]            # or A_seq = [[[..]], ...] with one matrix per step
//! B = [[1.0]]
//! C = [[1.0]]
//! # file = "system.toml" loads this table from another file instead
//!
//! [system.transition_noise]   # or [[system.transition_noise_seq]] per step
//! kind = "finite"             # gaussian | finite | zero | rademacher
//! atoms = [[0.0], [1.0]]
//! masses = [0.5, 0.5]
//! lattice_scale = 1.0         # optional, default 1
//! subgaussian_m = 4.0         # optional
//!
//! [system.obs_noise]
//! kind = "gaussian"
//! variances = [1.0]           # or `variance = 1.0`; `mean` defaults to 0
//!
//! [policy]
//! kind = "linear"             # linear | saturated
//! gain = [[-1.0]]
//! # lipschitz = 1.0           # optional declared constant (linear)
//! # limit = 2.0               # saturated only
//!
//! [reward]
//! kind = "avg_l1"             # avg_l1 | sum_norm (with lipschitz)
//!
//! [oracle]
//! kind = "enumeration"        # auto | kalman | enumeration | reference
//! max_paths = 1048576         # enumeration
//! particles = 100000          # reference
//!
//! [run]
//! n_list = [10, 100, 1000]
//! seeds = 100
//! master_seed = 0
//! horizons = [10, 20, 40]     # optional, defaults to [system.horizon]
//! out = "runs.csv"            # optional
//! jobs = 4                    # optional
//! ```
//!
//! Further optional sections: `[lowerbound]`, `[bounds]`, `[concentration]`
//! (see [`LowerBoundOptions`], [`BoundsOptions`], [`ConcentrationOptions`]).

use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::analysis::{BoundParams, BoundVariant};
use crate::error::{Error, Result};
use crate::model::{Policy, RewardFunction, SystemSpec};
use crate::noise::{NoiseDistribution, NoiseLaw};
use crate::oracle::{OracleKind, DEFAULT_MAX_PATHS};

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgaussian_m: Option<f64>,
}

impl NoiseSection {
    fn build(&self, default_dim: usize) -> std::result::Result<NoiseDistribution, String> {
        let dist = match self.kind.as_str() {
            "gaussian" => {
                let variances = match (&self.variances, self.variance) {
                    (Some(v), None) => v.clone(),
                    (None, Some(v)) => vec![v; self.dim.unwrap_or(default_dim)],
                    (Some(_), Some(_)) => return Err("give either `variances` or `variance`, not both".into()),
                    (None, None) => return Err("gaussian noise needs `variances` or `variance`".into()),
                };
                let mean = self.mean.clone().unwrap_or_else(|| vec![0.0; variances.len()]);
                NoiseDistribution::gaussian(DVector::from_vec(mean), DVector::from_vec(variances))
                    .map_err(|e| e.to_string())?
            }
            "finite" => {
                let atoms = self.atoms.as_ref().ok_or("finite noise needs `atoms`")?;
                let masses = match &self.masses {
                    Some(m) => m.clone(),
                    None => vec![1.0 / atoms.len() as f64; atoms.len()],
                };
                if masses.len() != atoms.len() {
                    return Err(format!("{} atoms but {} masses", atoms.len(), masses.len()));
                }
                let pairs = atoms.iter().zip(masses).map(|(a, m)| (DVector::from_column_slice(a), m)).collect();
                NoiseDistribution::finite_support(pairs, self.lattice_scale.unwrap_or(1.0)).map_err(|e| e.to_string())?
            }
            "zero" => NoiseDistribution::zero(self.dim.unwrap_or(default_dim)),
            "rademacher" => NoiseDistribution::rademacher(),
            other => return Err(format!("unknown noise kind `{other}`")),
        };
        Ok(match self.subgaussian_m {
            Some(m) => dist.with_subgaussian_m(m),
            None => dist,
        })
    }

    pub fn from_distribution(dist: &NoiseDistribution) -> Self {
        let mut s = match dist.law() {
            NoiseLaw::DiagonalGaussian { mean, variances } => NoiseSection {
                kind: "gaussian".into(),
                mean: Some(mean.as_slice().to_vec()),
                variances: Some(variances.as_slice().to_vec()),
                ..Default::default()
            },
            NoiseLaw::FiniteSupport(a) => NoiseSection {
                kind: "finite".into(),
                atoms: Some(a.points().iter().map(|p| p.as_slice().to_vec()).collect()),
                masses: Some(a.masses().to_vec()),
                lattice_scale: Some(a.lattice_scale()),
                ..Default::default()
            },
        };
        s.subgaussian_m = dist.subgaussian_m();
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_dim: Option<usize>,
    #[serde(default)]
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Rows>,
    #[serde(rename = "A_seq", default, skip_serializing_if = "Option::is_none")]
    pub a_seq: Option<Vec<Rows>>,
    #[serde(rename = "B_seq", default, skip_serializing_if = "Option::is_none")]
    pub b_seq: Option<Vec<Rows>>,
    #[serde(rename = "C_seq", default, skip_serializing_if = "Option::is_none")]
    pub c_seq: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_noise: Option<NoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_noise: Option<NoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_noise_seq: Option<Vec<NoiseSection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_noise_seq: Option<Vec<NoiseSection>>,
}

fn matrix(what: &str, rows: &Rows) -> std::result::Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(format!("`{what}` is empty"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("`{what}` has rows of different lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_seq(
    name: &str,
    single: &Option<Rows>,
    seq: &Option<Vec<Rows>>,
    horizon: usize,
) -> std::result::Result<Vec<DMatrix<f64>>, String> {
    match (single, seq) {
        (Some(m), None) => Ok(vec![matrix(name, m)?; horizon]),
        (None, Some(s)) if s.is_empty() => Err(format!("`{name}_seq` is empty")),
        (None, Some(s)) => s
            .iter()
            .take(horizon)
            .enumerate()
            .map(|(t, m)| matrix(&format!("{name}_seq[{t}]"), m))
            .collect(),
        (Some(_), Some(_)) => Err(format!("give either `{name}` or `{name}_seq`, not both")),
        (None, None) => Err(format!("missing `{name}` (or `{name}_seq`)")),
    }
}

fn noise_seq(
    name: &str,
    single: &Option<NoiseSection>,
    seq: &Option<Vec<NoiseSection>>,
    horizon: usize,
    dim: usize,
) -> std::result::Result<Vec<NoiseDistribution>, String> {
    match (single, seq) {
        (Some(n), None) => Ok(vec![n.build(dim).map_err(|e| format!("{name}: {e}"))?; horizon]),
        (None, Some(s)) => s
            .iter()
            .take(horizon)
            .enumerate()
            .map(|(t, n)| n.build(dim).map_err(|e| format!("{name}_seq[{t}]: {e}")))
            .collect(),
        (Some(_), Some(_)) => Err(format!("give either `{name}` or `{name}_seq`, not both")),
        (None, None) => Err(format!("missing `{name}` (or `{name}_seq`)")),
    }
}

impl SystemSection {
    /// Builds the system at the configured horizon.
    pub fn build(&self) -> std::result::Result<SystemSpec, String> {
        self.build_with_horizon(self.horizon)
    }

    /// Builds the system at `horizon`. Time-invariant entries are repeated;
    /// per-step sequences longer than `horizon` are truncated, shorter ones
    /// are kept as written so that validation reports the mismatch.
    pub fn build_with_horizon(&self, horizon: usize) -> std::result::Result<SystemSpec, String> {
        if horizon == 0 {
            return Err("`horizon` must be at least 1".into());
        }
        let a_seq = matrix_seq("A", &self.a, &self.a_seq, horizon)?;
        let b_seq = matrix_seq("B", &self.b, &self.b_seq, horizon)?;
        let c_seq = matrix_seq("C", &self.c, &self.c_seq, horizon)?;
        let state_dim = self
            .state_dim
            .or_else(|| self.x0.as_ref().map(Vec::len))
            .unwrap_or_else(|| a_seq[0].nrows());
        let action_dim = self.action_dim.unwrap_or_else(|| b_seq[0].ncols());
        let obs_dim = self.obs_dim.unwrap_or_else(|| c_seq[0].nrows());
        let x0 = DVector::from_vec(self.x0.clone().unwrap_or_else(|| vec![0.0; state_dim]));
        let transition_noise_seq =
            noise_seq("transition_noise", &self.transition_noise, &self.transition_noise_seq, horizon, state_dim)?;
        let obs_noise_seq = noise_seq("obs_noise", &self.obs_noise, &self.obs_noise_seq, horizon, obs_dim)?;
        Ok(SystemSpec {
            state_dim,
            action_dim,
            obs_dim,
            horizon,
            a_seq,
            b_seq,
            c_seq,
            transition_noise_seq,
            obs_noise_seq,
            x0,
        })
    }

    /// Inverse of [`SystemSection::build`]; constant sequences are written
    /// in the short form.
    pub fn from_spec(spec: &SystemSpec) -> Self {
        fn constant<T: PartialEq>(s: &[T]) -> bool {
            s.windows(2).all(|w| w[0] == w[1]) && !s.is_empty()
        }
        let mut out = SystemSection {
            state_dim: Some(spec.state_dim),
            action_dim: Some(spec.action_dim),
            obs_dim: Some(spec.obs_dim),
            horizon: spec.horizon,
            x0: Some(spec.x0.as_slice().to_vec()),
            ..Default::default()
        };
        let mats = |s: &[DMatrix<f64>]| -> (Option<Rows>, Option<Vec<Rows>>) {
            if constant(s) {
                (Some(rows_of(&s[0])), None)
            } else {
                (None, Some(s.iter().map(rows_of).collect()))
            }
        };
        (out.a, out.a_seq) = mats(&spec.a_seq);
        (out.b, out.b_seq) = mats(&spec.b_seq);
        (out.c, out.c_seq) = mats(&spec.c_seq);
        let noises = |s: &[NoiseDistribution]| -> (Option<NoiseSection>, Option<Vec<NoiseSection>>) {
            if constant(s) {
                (Some(NoiseSection::from_distribution(&s[0])), None)
            } else {
                (None, Some(s.iter().map(NoiseSection::from_distribution).collect()))
            }
        };
        (out.transition_noise, out.transition_noise_seq) = noises(&spec.transition_noise_seq);
        (out.obs_noise, out.obs_noise_seq) = noises(&spec.obs_noise_seq);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct SystemDocument {
    system: SystemSection,
}

/// Serializes a system as a standalone `[system]` document.
pub fn system_to_toml(spec: &SystemSpec) -> Result<String> {
    toml::to_string(&SystemDocument {
        system: SystemSection::from_spec(spec),
    })
    .map_err(|e| Error::Config(e.to_string()))
}

/// Parses a standalone `[system]` document.
pub fn system_from_toml(text: &str) -> Result<SystemSpec> {
    let doc: SystemDocument = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    doc.system.build().map_err(Error::Config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: String,
    pub gain: Rows,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub limit: Option<f64>,
}

impl PolicySection {
    pub fn build(&self) -> std::result::Result<Policy, String> {
        let gain = matrix("gain", &self.gain)?;
        match self.kind.as_str() {
            "linear" => match self.lipschitz {
                Some(l) => Policy::linear_with_constant(gain, l).map_err(|e| e.to_string()),
                None => Ok(Policy::linear(gain)),
            },
            "saturated" => {
                let limit = self.limit.ok_or("saturated policy needs `limit`")?;
                if !(limit > 0.0) {
                    return Err("`limit` must be positive".into());
                }
                Policy::saturated_linear(gain, limit).map_err(|e| e.to_string())
            }
            other => Err(format!("unknown policy kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub kind: String,
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

impl RewardSection {
    pub fn build(&self) -> std::result::Result<RewardFunction, String> {
        match self.kind.as_str() {
            "avg_l1" => Ok(RewardFunction::AvgL1),
            "sum_norm" => Ok(RewardFunction::SumNorm {
                lipschitz: self.lipschitz.unwrap_or(1.0),
            }),
            other => Err(format!("unknown reward kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub kind: String,
    #[serde(default)]
    pub max_paths: Option<usize>,
    #[serde(default)]
    pub particles: Option<usize>,
}

/// Resolved oracle choice; `Auto` is settled against the system later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleChoice {
    Auto,
    Fixed(OracleKind),
}

impl OracleChoice {
    pub fn resolve(&self, spec: &SystemSpec) -> OracleKind {
        match self {
            OracleChoice::Auto => OracleKind::auto(spec),
            OracleChoice::Fixed(k) => *k,
        }
    }
}

impl OracleSection {
    fn build(&self) -> std::result::Result<OracleChoice, String> {
        Ok(match self.kind.as_str() {
            "auto" => OracleChoice::Auto,
            "kalman" => OracleChoice::Fixed(OracleKind::KalmanGaussian),
            "enumeration" => OracleChoice::Fixed(OracleKind::EnumerationFiniteSupport {
                max_paths: self.max_paths.unwrap_or(DEFAULT_MAX_PATHS),
            }),
            "reference" => OracleChoice::Fixed(OracleKind::ReferenceFilter {
                particles: self.particles.unwrap_or(100_000),
            }),
            other => return Err(format!("unknown oracle kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(default)]
    n_list: Option<Vec<usize>>,
    #[serde(default)]
    seeds: Option<usize>,
    #[serde(default)]
    master_seed: Option<u64>,
    #[serde(default)]
    horizons: Option<Vec<usize>>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    jobs: Option<usize>,
}

/// `[lowerbound]`: the `(T, N)` grid of the particle-death experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowerBoundOptions {
    pub horizons: Vec<usize>,
    pub particles: Vec<usize>,
    pub replications: usize,
    pub k: u64,
    /// Adds the cell `N = ⌊2^T / 2k⌋` for every horizon.
    pub include_k_cell: bool,
}

impl Default for LowerBoundOptions {
    fn default() -> Self {
        LowerBoundOptions {
            horizons: vec![1, 3, 5, 8],
            particles: vec![1, 2, 8, 64],
            replications: 10_000,
            k: 2,
            include_k_cell: true,
        }
    }
}

/// `[bounds]`: constants fed to the particle-count calculator. When
/// `p_from_lowerbound` is set, `p = 2^-T` at each horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsOptions {
    pub variants: Vec<String>,
    pub horizons: Vec<usize>,
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
    pub epsilon: f64,
    pub delta: f64,
    pub p: f64,
    pub p_from_lowerbound: bool,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        BoundsOptions {
            variants: vec!["nonlinear".into(), "linear".into()],
            horizons: vec![3, 6, 12, 24],
            l_r: 1.0,
            l_g: 1.0,
            c_a: 1.0,
            rho_a: 1.0,
            c_b: 1.0,
            c_ab: 1.0,
            rho_ab: 1.0,
            c_bg: 1.0,
            subgaussian_m: 1.0,
            d: 1,
            epsilon: 0.1,
            delta: 0.05,
            p: 1.0,
            p_from_lowerbound: false,
        }
    }
}

impl BoundsOptions {
    pub fn variants(&self) -> Result<Vec<BoundVariant>> {
        self.variants
            .iter()
            .map(|v| match v.as_str() {
                "nonlinear" => Ok(BoundVariant::Nonlinear),
                "linear" => Ok(BoundVariant::Linear),
                other => Err(Error::Config(format!("[bounds]: unknown variant `{other}`"))),
            })
            .collect()
    }

    pub fn params(&self, horizon: usize) -> BoundParams {
        BoundParams {
            l_r: self.l_r,
            l_g: self.l_g,
            c_a: self.c_a,
            rho_a: self.rho_a,
            c_b: self.c_b,
            c_ab: self.c_ab,
            rho_ab: self.rho_ab,
            c_bg: self.c_bg,
            subgaussian_m: self.subgaussian_m,
            d: self.d,
            horizon,
            epsilon: self.epsilon,
            delta: self.delta,
            p: if self.p_from_lowerbound {
                2f64.powi(-(horizon as i32))
            } else {
                self.p
            },
        }
    }
}

/// `[concentration]`: fresh ensembles on one fixed record of the system.
/// `m` defaults to the transition noise's declared sub-Gaussian parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationOptions {
    pub particles: Vec<usize>,
    pub beta: f64,
    /// Per-`N` exponent; defaults to `ln N + 6`, so `N e^{-β'}` stays small.
    pub beta_prime: Option<f64>,
    pub replications: usize,
    pub m: Option<f64>,
}

impl Default for ConcentrationOptions {
    fn default() -> Self {
        ConcentrationOptions {
            particles: vec![100, 1000, 10_000],
            beta: 0.25,
            beta_prime: None,
            replications: 2000,
            m: None,
        }
    }
}

impl ConcentrationOptions {
    pub fn beta_prime_for(&self, n: usize) -> f64 {
        self.beta_prime.unwrap_or_else(|| (n as f64).ln() + 6.0)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<Spanned<SystemSection>>,
    policy: Option<Spanned<PolicySection>>,
    reward: Option<Spanned<RewardSection>>,
    oracle: Option<Spanned<OracleSection>>,
    run: Option<Spanned<RunSection>>,
    lowerbound: Option<Spanned<LowerBoundOptions>>,
    bounds: Option<Spanned<BoundsOptions>>,
    concentration: Option<Spanned<ConcentrationOptions>>,
}

/// A parsed configuration. Sections that a command does not need may be absent.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: Option<SystemSection>,
    pub spec: Option<SystemSpec>,
    pub policy: Option<Policy>,
    pub reward: RewardFunction,
    pub oracle: OracleChoice,
    pub n_list: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seeds: usize,
    pub master_seed: u64,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub lowerbound: LowerBoundOptions,
    pub bounds: BoundsOptions,
    pub concentration: Option<ConcentrationOptions>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: None,
            spec: None,
            policy: None,
            reward: RewardFunction::AvgL1,
            oracle: OracleChoice::Auto,
            n_list: Vec::new(),
            horizons: Vec::new(),
            seeds: 1,
            master_seed: 0,
            out: None,
            jobs: None,
            lowerbound: LowerBoundOptions::default(),
            bounds: BoundsOptions::default(),
            concentration: None,
        }
    }
}

fn line_of(text: &str, span: &Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

fn anchored<T>(text: &str, span: &Range<usize>, section: &str, r: std::result::Result<T, String>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("line {}: [{section}]: {e}", line_of(text, span))))
}

impl RunConfig {
    /// Parses config text; relative `file` paths resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        let mut cfg = RunConfig::default();

        if let Some(sys) = raw.system {
            let span = sys.span();
            let mut section = sys.into_inner();
            if let Some(file) = section.file.clone() {
                let path = match base {
                    Some(b) if file.is_relative() => b.join(&file),
                    _ => file.clone(),
                };
                let body = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("line {}: [system]: cannot read {}: {e}", line_of(text, &span), path.display())))?;
                let doc: SystemDocument = toml::from_str(&body)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
                section = doc.system;
            }
            let spec = anchored(text, &span, "system", section.build())?;
            cfg.spec = Some(spec);
            cfg.system = Some(section);
        }
        if let Some(p) = raw.policy {
            cfg.policy = Some(anchored(text, &p.span(), "policy", p.get_ref().build())?);
        }
        if let Some(r) = raw.reward {
            cfg.reward = anchored(text, &r.span(), "reward", r.get_ref().build())?;
        }
        if let Some(o) = raw.oracle {
            cfg.oracle = anchored(text, &o.span(), "oracle", o.get_ref().build())?;
        }
        if let Some(run) = raw.run {
            let span = run.span();
            let run = run.into_inner();
            if let Some(n_list) = run.n_list {
                let check = if n_list.is_empty() {
                    Err("`n_list` must not be empty".to_string())
                } else if n_list.contains(&0) {
                    Err("`n_list` entries must be at least 1".to_string())
                } else if n_list.windows(2).any(|w| w[0] >= w[1]) {
                    Err("`n_list` must be strictly ascending".to_string())
                } else {
                    Ok(n_list)
                };
                cfg.n_list = anchored(text, &span, "run", check)?;
            }
            if let Some(seeds) = run.seeds {
                cfg.seeds = anchored(text, &span, "run", if seeds == 0 { Err("`seeds` must be at least 1".into()) } else { Ok(seeds) })?;
            }
            if let Some(h) = run.horizons {
                let check = if h.is_empty() || h.contains(&0) {
                    Err("`horizons` must be a nonempty list of positive integers".to_string())
                } else {
                    Ok(h)
                };
                cfg.horizons = anchored(text, &span, "run", check)?;
            }
            if let Some(j) = run.jobs {
                cfg.jobs = Some(anchored(text, &span, "run", if j == 0 { Err("`jobs` must be at least 1".into()) } else { Ok(j) })?);
            }
            cfg.master_seed = run.master_seed.unwrap_or(0);
            cfg.out = run.out;
        }
        if let Some(lb) = raw.lowerbound {
            let span = lb.span();
            let lb = lb.into_inner();
            let check = if lb.horizons.is_empty() || lb.particles.is_empty() {
                Err("`horizons` and `particles` must not be empty".to_string())
            } else if lb.k == 0 || lb.replications == 0 {
                Err("`k` and `replications` must be at least 1".to_string())
            } else {
                Ok(lb)
            };
            cfg.lowerbound = anchored(text, &span, "lowerbound", check)?;
        }
        if let Some(b) = raw.bounds {
            let span = b.span();
            let b = b.into_inner();
            anchored(text, &span, "bounds", b.variants().map(|_| ()).map_err(|e| e.to_string()))?;
            cfg.bounds = b;
        }
        if let Some(c) = raw.concentration {
            let span = c.span();
            let c = c.into_inner();
            let check = if c.particles.is_empty() { Err("`particles` must not be empty".to_string()) } else { Ok(c) };
            cfg.concentration = Some(anchored(text, &span, "concentration", check)?);
        }
        if cfg.horizons.is_empty() {
            if let Some(spec) = &cfg.spec {
                cfg.horizons = vec![spec.horizon];
            }
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
            .map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    pub fn require_spec(&self) -> Result<&SystemSpec> {
        self.spec.as_ref().ok_or_else(|| Error::Config("missing [system] section".into()))
    }

    pub fn require_policy(&self) -> Result<&Policy> {
        self.policy.as_ref().ok_or_else(|| Error::Config("missing [policy] section".into()))
    }

    pub fn require_n_list(&self) -> Result<&[usize]> {
        if self.n_list.is_empty() {
            Err(Error::Config("[run]: `n_list` must not be empty".into()))
        } else {
            Ok(&self.n_list)
        }
    }

    /// The system rebuilt at another horizon.
    pub fn spec_at(&self, horizon: usize) -> Result<SystemSpec> {
        let section = self.system.as_ref().ok_or_else(|| Error::Config("missing [system] section".into()))?;
        section.build_with_horizon(horizon).map_err(|e| Error::Config(format!("[system] at horizon {horizon}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[system]
horizon = 3
x0 = [0.0]
A = [[0.9]]
B = [[1.0]]
C = [[1.0]]

[system.transition_noise]
kind = "gaussian"
variance = 1.0

[system.obs_noise]
kind = "gaussian"
variances = [2.0]

[policy]
kind = "linear"
gain = [[-0.5]]

[run]
n_list = [10, 100]
seeds = 4
"#;

    #[test]
    fn parses_basic_config() {
        let cfg = RunConfig::from_toml(BASIC, None).unwrap();
        let spec = cfg.spec.unwrap();
        assert_eq!(spec.horizon, 3);
        assert_eq!(spec.a_seq.len(), 3);
        assert_eq!(spec.a_seq[2][(0, 0)], 0.9);
        assert!(spec.validate().is_valid());
        assert_eq!(cfg.n_list, vec![10, 100]);
        assert_eq!(cfg.seeds, 4);
        assert_eq!(cfg.horizons, vec![3]);
        assert_eq!(cfg.policy.unwrap().lipschitz_constant(), 0.5);
    }

    #[test]
    fn matrices_are_row_major() {
        let m = matrix("A", &vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 3.0);
        assert!(matrix("A", &vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn empty_n_list_is_a_config_error_with_line() {
        let text = BASIC.replace("n_list = [10, 100]", "n_list = []");
        match RunConfig::from_toml(&text, None) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("n_list"), "{msg}");
                assert!(msg.starts_with("line "), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn descending_n_list_and_zero_seeds_rejected() {
        assert!(RunConfig::from_toml(&BASIC.replace("[10, 100]", "[100, 10]"), None).is_err());
        assert!(RunConfig::from_toml(&BASIC.replace("seeds = 4", "seeds = 0"), None).is_err());
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = BASIC.replace("horizon = 3", "horizon = = 3");
        match RunConfig::from_toml(&text, None) {
            Err(Error::Config(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml(&BASIC.replace("seeds = 4", "seedz = 4"), None).is_err());
    }

    #[test]
    fn short_sequence_is_kept_for_validation() {
        let text = BASIC.replace("A = [[0.9]]", "A_seq = [[[0.9]], [[0.9]]]");
        let cfg = RunConfig::from_toml(&text, None).unwrap();
        let report = cfg.spec.unwrap().validate();
        assert!(!report.is_valid());
        assert!(report.to_string().contains("A"), "{report}");
    }

    #[test]
    fn system_round_trips() {
        let spec = RunConfig::from_toml(BASIC, None).unwrap().spec.unwrap();
        let text = system_to_toml(&spec).unwrap();
        assert_eq!(system_from_toml(&text).unwrap(), spec);

        let mut varying = SystemSpec::scalar(
            1.0,
            1.0,
            1.0,
            NoiseDistribution::finite_support(
                vec![(DVector::from_element(1, 0.0), 0.25), (DVector::from_element(1, 0.5), 0.75)],
                0.5,
            )
            .unwrap()
            .with_subgaussian_m(4.0),
            NoiseDistribution::zero(1),
            0.1,
            3,
        );
        varying.a_seq[1] = DMatrix::from_element(1, 1, 0.3);
        varying.obs_noise_seq[2] = NoiseDistribution::isotropic_gaussian(1, 0.7).unwrap();
        let text = system_to_toml(&varying).unwrap();
        assert!(text.contains("A_seq"));
        assert_eq!(system_from_toml(&text).unwrap(), varying);
    }

    #[test]
    fn rebuild_at_other_horizon() {
        let cfg = RunConfig::from_toml(BASIC, None).unwrap();
        let s = cfg.spec_at(10).unwrap();
        assert_eq!(s.horizon, 10);
        assert!(s.validate().is_valid());
    }
}
