//! Random instances shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pfplan_core::model::{draw_noise_path, Environment, Policy, SystemSpec, Trajectory};
use pfplan_core::noise::NoiseDistribution;
use pfplan_core::rng::StreamKey;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> NoiseDistribution {
    let var = DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0));
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-0.3..0.3));
    NoiseDistribution::gaussian(mean, var).unwrap()
}

/// Time-varying Gaussian system with random dimensions up to 3.
pub fn random_gaussian_spec(rng: &mut ChaCha8Rng, max_horizon: usize) -> SystemSpec {
    let d = rng.random_range(1..=3);
    let k = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let t = rng.random_range(1..=max_horizon);
    SystemSpec {
        state_dim: d,
        action_dim: k,
        obs_dim: m,
        horizon: t,
        a_seq: (0..t).map(|_| random_matrix(rng, d, d, 1.1)).collect(),
        b_seq: (0..t).map(|_| random_matrix(rng, d, k, 1.0)).collect(),
        c_seq: (0..t).map(|_| random_matrix(rng, m, d, 1.0)).collect(),
        transition_noise_seq: (0..t).map(|_| random_gaussian(rng, d)).collect(),
        obs_noise_seq: (0..t).map(|_| random_gaussian(rng, m)).collect(),
        x0: random_vector(rng, d, 1.0),
    }
}

/// Integer dynamics with two or three lattice atoms per step and Gaussian
/// observations, so the enumeration oracle applies.
pub fn random_atomic_spec(rng: &mut ChaCha8Rng, max_horizon: usize) -> SystemSpec {
    let d = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let t = rng.random_range(1..=max_horizon);
    let int_matrix = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1..=1) as f64);
    let atoms = |rng: &mut ChaCha8Rng| {
        let count = rng.random_range(2..=3usize);
        let mut pts: Vec<DVector<f64>> = Vec::new();
        while pts.len() < count {
            let p = DVector::from_fn(d, |_, _| rng.random_range(-2..=2) as f64 * 0.5);
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
        let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut masses: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let head: f64 = masses[..count - 1].iter().sum();
        masses[count - 1] = 1.0 - head;
        NoiseDistribution::finite_support(pts.into_iter().zip(masses).collect(), 0.5).unwrap()
    };
    SystemSpec {
        state_dim: d,
        action_dim: 1,
        obs_dim: m,
        horizon: t,
        a_seq: (0..t).map(|_| int_matrix(rng, d, d)).collect(),
        b_seq: (0..t).map(|_| random_matrix(rng, d, 1, 1.0)).collect(),
        c_seq: (0..t).map(|_| random_matrix(rng, m, d, 1.0)).collect(),
        transition_noise_seq: (0..t).map(|_| atoms(rng)).collect(),
        obs_noise_seq: (0..t).map(|_| random_gaussian(rng, m)).collect(),
        x0: DVector::from_fn(d, |_, _| rng.random_range(-2..=2) as f64),
    }
}

pub fn random_linear_policy(rng: &mut ChaCha8Rng, spec: &SystemSpec) -> Policy {
    Policy::linear(random_matrix(rng, spec.action_dim, spec.state_dim, 0.8))
}

/// Open-loop record: random actions, observations from the true system.
pub fn random_record(rng: &mut ChaCha8Rng, spec: &SystemSpec, key: StreamKey) -> Trajectory {
    let noise = draw_noise_path(spec, key).unwrap();
    let mut env = Environment::new(spec, noise);
    for _ in 0..spec.horizon {
        let u = random_vector(rng, spec.action_dim, 1.0);
        env.step(&u).unwrap();
    }
    env.into_trajectory()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
