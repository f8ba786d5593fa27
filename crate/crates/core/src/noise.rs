//! Transition and observation noise laws.
//!
//! Two families are supported: diagonal Gaussians (continuous, evaluated as a
//! density) and finite-support laws (atomic, evaluated as a point mass).
//! Atomic laws live on an integer lattice `scale * Z^n`: each atom is stored
//! as integer coordinates, and a query point has positive mass only when it
//! maps exactly onto the lattice coordinates of an atom. Pick a power-of-two
//! scale (the default is 1) so that sums of atoms stay exactly representable.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Whether weights computed from this law are densities or masses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Continuous,
    Atomic,
}

/// Finite support on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms {
    scale: f64,
    coords: Vec<Vec<i64>>,
    points: Vec<DVector<f64>>,
    masses: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Atoms {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lattice_scale(&self) -> f64 {
        self.scale
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, f64)> {
        self.points.iter().zip(self.masses.iter().copied())
    }

    fn lattice_coords(&self, x: &[f64]) -> Option<Vec<i64>> {
        x.iter()
            .map(|&v| {
                let q = v / self.scale;
                if q.is_finite() && q == q.round() && q.abs() < 9.0e15 && q * self.scale == v {
                    Some(q as i64)
                } else {
                    None
                }
            })
            .collect()
    }

    fn mass_at(&self, x: &[f64]) -> f64 {
        match self.lattice_coords(x) {
            Some(c) => self
                .coords
                .iter()
                .position(|a| *a == c)
                .map_or(0.0, |i| self.masses[i]),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLaw {
    DiagonalGaussian {
        mean: DVector<f64>,
        variances: DVector<f64>,
    },
    FiniteSupport(Atoms),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    law: NoiseLaw,
    subgaussian_m: Option<f64>,
}

const MASS_TOLERANCE: f64 = 1e-12;

impl NoiseDistribution {
    pub fn gaussian(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if mean.len() != variances.len() || mean.is_empty() {
            return Err(Error::InvalidNoise(format!(
                "mean has {} entries, variances {}",
                mean.len(),
                variances.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidNoise("non-finite Gaussian mean".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidNoise("Gaussian variances must be strictly positive".into()));
        }
        Ok(NoiseDistribution {
            law: NoiseLaw::DiagonalGaussian { mean, variances },
            subgaussian_m: None,
        })
    }

    /// Standard normal in `dim` dimensions scaled to `variance`.
    pub fn isotropic_gaussian(dim: usize, variance: f64) -> Result<Self> {
        Self::gaussian(DVector::zeros(dim), DVector::from_element(dim, variance))
    }

    pub fn finite_support(atoms: Vec<(DVector<f64>, f64)>, lattice_scale: f64) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidNoise("finite support needs at least one atom".into()));
        }
        if !(lattice_scale > 0.0 && lattice_scale.is_finite()) {
            return Err(Error::InvalidNoise("lattice scale must be positive".into()));
        }
        let dim = atoms[0].0.len();
        if dim == 0 {
            return Err(Error::InvalidNoise("atoms must have positive dimension".into()));
        }
        let mut built = Atoms {
            scale: lattice_scale,
            coords: Vec::with_capacity(atoms.len()),
            points: Vec::with_capacity(atoms.len()),
            masses: Vec::with_capacity(atoms.len()),
            cumulative: Vec::with_capacity(atoms.len()),
        };
        let mut total = 0.0;
        for (point, mass) in atoms {
            if point.len() != dim {
                return Err(Error::InvalidNoise("atoms have inconsistent dimensions".into()));
            }
            if !(mass > 0.0 && mass <= 1.0) {
                return Err(Error::InvalidNoise(format!("atom mass {mass} outside (0, 1]")));
            }
            let coords = built.lattice_coords(point.as_slice()).ok_or_else(|| {
                Error::InvalidNoise(format!(
                    "atom {:?} is not exactly on the lattice with scale {lattice_scale}",
                    point.as_slice()
                ))
            })?;
            if built.coords.contains(&coords) {
                return Err(Error::InvalidNoise(format!("duplicate atom {:?}", point.as_slice())));
            }
            total += mass;
            built.coords.push(coords);
            built.points.push(point);
            built.masses.push(mass);
            built.cumulative.push(total);
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidNoise(format!("atom masses sum to {total}, not 1")));
        }
        if let Some(last) = built.cumulative.last_mut() {
            *last = f64::INFINITY;
        }
        Ok(NoiseDistribution {
            law: NoiseLaw::FiniteSupport(built),
            subgaussian_m: None,
        })
    }

    /// Point mass at `point` (zero noise when `point` is the origin).
    pub fn dirac(point: DVector<f64>) -> Result<Self> {
        Self::finite_support(vec![(point, 1.0)], 1.0)
    }

    pub fn zero(dim: usize) -> Self {
        Self::dirac(DVector::zeros(dim)).expect("origin is on every lattice")
    }

    /// `½δ(ξ - 1) + ½δ(ξ + 1)` in one dimension.
    pub fn rademacher() -> Self {
        Self::finite_support(
            vec![(DVector::from_element(1, 1.0), 0.5), (DVector::from_element(1, -1.0), 0.5)],
            1.0,
        )
        .expect("valid two-atom law")
    }

    /// Declares the sub-Gaussian parameter `m` (variance proxy `1/m`).
    pub fn with_subgaussian_m(mut self, m: f64) -> Self {
        self.subgaussian_m = Some(m);
        self
    }

    pub fn subgaussian_m(&self) -> Option<f64> {
        self.subgaussian_m
    }

    pub fn law(&self) -> &NoiseLaw {
        &self.law
    }

    pub fn atoms(&self) -> Option<&Atoms> {
        match &self.law {
            NoiseLaw::FiniteSupport(a) => Some(a),
            NoiseLaw::DiagonalGaussian { .. } => None,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        match self.law {
            NoiseLaw::DiagonalGaussian { .. } => NoiseKind::Continuous,
            NoiseLaw::FiniteSupport(_) => NoiseKind::Atomic,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.law {
            NoiseLaw::DiagonalGaussian { mean, .. } => mean.len(),
            NoiseLaw::FiniteSupport(a) => a.points[0].len(),
        }
    }

    /// True for a single atom: the law has no randomness.
    pub fn is_degenerate(&self) -> bool {
        matches!(&self.law, NoiseLaw::FiniteSupport(a) if a.len() == 1)
    }

    pub fn mean(&self) -> DVector<f64> {
        match &self.law {
            NoiseLaw::DiagonalGaussian { mean, .. } => mean.clone(),
            NoiseLaw::FiniteSupport(a) => a
                .iter()
                .fold(DVector::zeros(self.dim()), |acc, (p, m)| acc + p * m),
        }
    }

    /// Gaussian view: `(mean, diagonal covariance)`. A single atom is treated
    /// as a zero-covariance Gaussian.
    pub fn as_gaussian(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        match &self.law {
            NoiseLaw::DiagonalGaussian { mean, variances } => Some((mean.clone(), variances.clone())),
            NoiseLaw::FiniteSupport(a) if a.len() == 1 => {
                Some((a.points[0].clone(), DVector::zeros(a.points[0].len())))
            }
            NoiseLaw::FiniteSupport(_) => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.law {
            NoiseLaw::DiagonalGaussian { mean, variances } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = mean[j] + variances[j].sqrt() * z;
                }
            }
            NoiseLaw::FiniteSupport(a) => {
                let idx = if a.len() == 1 {
                    0
                } else {
                    let u: f64 = rng.random();
                    a.cumulative.iter().position(|&c| u < c).unwrap_or(a.len() - 1)
                };
                out.copy_from_slice(a.points[idx].as_slice());
            }
        }
    }

    /// Density (continuous) or point mass (atomic) at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        match &self.law {
            NoiseLaw::DiagonalGaussian { .. } => self.log_density(x).exp(),
            NoiseLaw::FiniteSupport(a) => a.mass_at(x),
        }
    }

    /// `ln density(x)`, with `-inf` for zero.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match &self.law {
            NoiseLaw::DiagonalGaussian { mean, variances } => {
                let mut acc = 0.0;
                for j in 0..mean.len() {
                    let r = x[j] - mean[j];
                    acc -= 0.5 * ((2.0 * std::f64::consts::PI * variances[j]).ln() + r * r / variances[j]);
                }
                acc
            }
            NoiseLaw::FiniteSupport(a) => {
                let m = a.mass_at(x);
                if m > 0.0 {
                    m.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `ln E[exp(u·(ξ - Eξ))]` in closed form.
    pub fn log_mgf_centered(&self, u: &[f64]) -> f64 {
        match &self.law {
            NoiseLaw::DiagonalGaussian { variances, .. } => {
                u.iter().zip(variances.iter()).map(|(ui, v)| 0.5 * ui * ui * v).sum()
            }
            NoiseLaw::FiniteSupport(a) => {
                let mean = self.mean();
                let terms: Vec<f64> = a
                    .iter()
                    .map(|(p, m)| {
                        let dot: f64 = u.iter().zip(p.iter().zip(mean.iter())).map(|(ui, (pi, mi))| ui * (pi - mi)).sum();
                        m.ln() + dot
                    })
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }
}

/// Stable `ln Σ exp(v_i)`; `-inf` for an empty slice or all `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgfReport {
    pub passed: bool,
    pub m_candidate: f64,
    pub trials: usize,
    /// Largest `E[e^{u·(ξ-Eξ)}] / e^{‖u‖²/(2m)}` over the sampled `u`.
    pub max_ratio: f64,
}

const MGF_LOG_TOLERANCE: f64 = 1e-12;

/// Checks the sub-Gaussian MGF inequality with parameter `1/m_candidate` on
/// `trials` random vectors `u` with `‖u‖ ≤ 3√m`.
pub fn mgf_bound_check(dist: &NoiseDistribution, m_candidate: f64, trials: usize, key: &StreamKey) -> MgfReport {
    let dim = dist.dim();
    let mut rng = key.stream(0);
    let radius = 3.0 * m_candidate.sqrt();
    let inv_m = 1.0 / m_candidate;
    let mut max_log = f64::NEG_INFINITY;
    for _ in 0..trials {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r: f64 = radius * (1.0 - rng.random::<f64>());
        for v in u.iter_mut() {
            *v *= r / norm;
        }
        let log_ratio = match dist.law() {
            NoiseLaw::DiagonalGaussian { variances, .. } => u
                .iter()
                .zip(variances.iter())
                .map(|(ui, v)| 0.5 * ui * ui * (v - inv_m))
                .sum(),
            NoiseLaw::FiniteSupport(_) => {
                let sq: f64 = u.iter().map(|v| v * v).sum();
                dist.log_mgf_centered(&u) - 0.5 * sq * inv_m
            }
        };
        max_log = max_log.max(log_ratio);
    }
    MgfReport {
        passed: max_log <= MGF_LOG_TOLERANCE,
        m_candidate,
        trials,
        max_ratio: max_log.exp(),
    }
}
