mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pfplan_core::analysis::{concentration_experiment, ConcentrationParams};
use pfplan_core::coupled::{gap_sweep, run_ideal_planner};
use pfplan_core::lowerbound::{build_lowerbound_process, run_death_experiment, survival_probability_exact};
use pfplan_core::model::{draw_noise_path, step_state, RewardFunction, SystemSpec};
use pfplan_core::noise::NoiseDistribution;
use pfplan_core::oracle::{
    enumerate_posterior_mean, kalman_posterior_mean, reference_filter_mean, EnumerationDag, OracleKind,
};
use pfplan_core::pf::{run_pf_planner, FilterOptions, HistoryPolicy};
use pfplan_core::presets::preset;
use pfplan_core::rng::{Domain, StreamKey};
use rand::Rng;
use rayon::prelude::*;

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Bayes filter for a scalar Gaussian system on a uniform grid.
fn grid_posterior_mean(a: f64, b: f64, c: f64, q: f64, r: f64, x0: f64, actions: &[f64], obs: &[f64]) -> f64 {
    let (lo, h, n) = (-20.0, 0.01, 4001);
    let xs: Vec<f64> = (0..n).map(|j| lo + j as f64 * h).collect();
    let mut p: Vec<f64> = xs.iter().map(|&y| normal_pdf(y - (a * x0 + b * actions[0]), q)).collect();
    for t in 0..obs.len() {
        if t > 0 {
            let prev = p.clone();
            p = xs
                .iter()
                .map(|&y| {
                    prev.iter().zip(&xs).map(|(pj, &xj)| pj * normal_pdf(y - (a * xj + b * actions[t]), q)).sum::<f64>() * h
                })
                .collect();
        }
        for (pj, &xj) in p.iter_mut().zip(&xs) {
            *pj *= normal_pdf(obs[t] - c * xj, r);
        }
    }
    let z: f64 = p.iter().sum();
    p.iter().zip(&xs).map(|(pj, xj)| pj * xj).sum::<f64>() / z
}

fn scalar_gaussian(a: f64, q: f64, r: f64, x0: f64, t: usize) -> SystemSpec {
    SystemSpec::scalar(
        a,
        1.0,
        1.0,
        NoiseDistribution::isotropic_gaussian(1, q).unwrap(),
        NoiseDistribution::isotropic_gaussian(1, r).unwrap(),
        x0,
        t,
    )
}

#[test]
fn kalman_conjugate_example_matches_grid() {
    let s = scalar_gaussian(1.0, 1.0, 1.0, 0.0, 1);
    let k = kalman_posterior_mean(&s, &[v(&[2.0])], &[v(&[0.0])]).unwrap();
    let g = grid_posterior_mean(1.0, 1.0, 1.0, 1.0, 1.0, 0.0, &[0.0], &[2.0]);
    assert!((k.mean[0] - 1.0).abs() < 1e-12);
    assert!((g - 1.0).abs() < 1e-8, "grid {g}");
}

#[test]
fn kalman_matches_grid_on_random_scalar_systems() {
    let mut r = rng(41);
    for case in 0..12 {
        let a = r.random_range(-1.2..1.2);
        let q = r.random_range(0.3..2.0);
        let var_o = r.random_range(0.3..2.0);
        let x0 = r.random_range(-1.0..1.0);
        let t = r.random_range(1..=4);
        let s = scalar_gaussian(a, q, var_o, x0, t);
        let rec = random_record(&mut r, &s, StreamKey::from_seed(case));
        let acts: Vec<f64> = rec.actions.iter().map(|u| u[0]).collect();
        let obs: Vec<f64> = rec.observations.iter().map(|o| o[0]).collect();
        let k = kalman_posterior_mean(&s, &rec.observations, &rec.actions).unwrap().mean[0];
        let g = grid_posterior_mean(a, 1.0, 1.0, q, var_o, x0, &acts, &obs);
        assert!((k - g).abs() < 1e-6, "case {case}: kalman {k} grid {g}");
    }
}

fn reference_errors(spec: &SystemSpec, seeds: u64, particles: &[usize]) -> Vec<Vec<f64>> {
    let cfg = preset("gaussian").unwrap();
    let g = cfg.policy.unwrap();
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let key = StreamKey::from_seed(900).derive(Domain::Cell, s);
            let noise = draw_noise_path(spec, key.derive(Domain::Environment, 0)).unwrap();
            let (traj, _, _) = run_ideal_planner(spec, &g, OracleKind::KalmanGaussian, noise, &key, false).unwrap();
            let exact = kalman_posterior_mean(spec, &traj.observations, &traj.actions).unwrap().mean;
            particles
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let y = reference_filter_mean(spec, &traj.observations, &traj.actions, n, &key.derive(Domain::Reference, i as u64))
                        .unwrap();
                    (y - &exact).norm()
                })
                .collect()
        })
        .collect()
}

/// A 10x larger reference ensemble shrinks the median error by about √10.
#[test]
fn reference_filter_error_shrinks_at_monte_carlo_rate() {
    let s = scalar_gaussian(0.9, 1.0, 1.0, 0.0, 5);
    let errs = reference_errors(&s, 50, &[100_000, 1_000_000]);
    let m5 = median(errs.iter().map(|e| e[0]).collect());
    let m6 = median(errs.iter().map(|e| e[1]).collect());
    let ratio = m5 / m6;
    let expected = 10f64.sqrt();
    println!("median |err| at 1e5 = {m5:.5}, at 1e6 = {m6:.5}, ratio {ratio:.3} (expected {expected:.3})");
    assert!(ratio > expected / 2.0 && ratio < expected * 2.0, "ratio {ratio}");
}

#[test]
fn reference_filter_converges_to_enumeration() {
    let mut r = rng(77);
    let mut errs = [Vec::new(), Vec::new()];
    for case in 0..30u64 {
        let s = random_atomic_spec(&mut r, 4);
        let rec = random_record(&mut r, &s, StreamKey::from_seed(case));
        let exact = enumerate_posterior_mean(&s, &rec.observations, &rec.actions, 1 << 16).unwrap().mean;
        for (i, n) in [1000usize, 100_000].into_iter().enumerate() {
            let key = StreamKey::from_seed(case).derive(Domain::Reference, i as u64);
            let y = reference_filter_mean(&s, &rec.observations, &rec.actions, n, &key).unwrap();
            errs[i].push((y - &exact).norm());
        }
    }
    let (small, large) = (median(errs[0].clone()), median(errs[1].clone()));
    assert!(large < small / 3.0, "median error {small} at 1e3, {large} at 1e5");
    assert!(large < 0.02, "{large}");
}

/// Survival on the lower-bound instance with T = 3, N = 4, by enumerating all
/// 2^12 particle noise assignments through the model's own dynamics and
/// observation law.
#[test]
fn lowerbound_survival_by_exhaustive_enumeration() {
    let inst = build_lowerbound_process(3).unwrap();
    let s = &inst.spec;
    let (t_max, n) = (3usize, 4usize);
    let mut survive = 0u32;
    for bits in 0u32..1 << (t_max * n) {
        let alive = (0..n).any(|i| {
            let mut x = s.x0.clone();
            (0..t_max).all(|t| {
                let xi = if bits >> (i * t_max + t) & 1 == 1 { 1.0 } else { -1.0 };
                x = step_state(s, t, &x, &v(&[0.0]), &v(&[xi])).unwrap();
                let resid = &inst.observations[t] - &s.c_seq[t] * &x;
                s.obs_noise_seq[t].density(resid.as_slice()) > 0.0
            })
        });
        survive += alive as u32;
    }
    let enumerated = survive as f64 / 4096.0;
    assert_eq!(enumerated, 1.0 - (7.0f64 / 8.0).powi(4));
    assert!((survival_probability_exact(3, 4) - enumerated).abs() < 1e-15);
    assert!((enumerated - 0.41381).abs() < 1e-5);
}

#[test]
fn lowerbound_closed_form_examples() {
    let r = run_death_experiment(10, 2048, 4000, 2, &StreamKey::from_seed(5)).unwrap();
    assert!((r.exact - 0.8648).abs() < 1e-4, "{}", r.exact);
    assert!(r.within_3_sigma, "{r:?}");
    let r = run_death_experiment(1, 1, 10_000, 2, &StreamKey::from_seed(6)).unwrap();
    assert!((r.empirical - 0.5).abs() <= 3.0 * 0.005, "{}", r.empirical);
    let r = run_death_experiment(3, 2, 10_000, 2, &StreamKey::from_seed(7)).unwrap();
    assert!(r.empirical <= 0.5 && r.within_3_sigma, "{r:?}");
    assert!((r.exact - 0.234375).abs() < 1e-12);
}

#[test]
fn single_particle_survives_with_probability_two_to_minus_t() {
    let inst = build_lowerbound_process(4).unwrap();
    let g = pfplan_core::model::Policy::linear(DMatrix::zeros(1, 1));
    let reps = 8000;
    let deaths = (0..reps)
        .filter(|&r| {
            let run = run_pf_planner(
                &inst.spec,
                &g,
                1,
                &StreamKey::from_seed(8).derive(Domain::Replication, r),
                inst.conditioned_noise(),
                FilterOptions {
                    history: HistoryPolicy::Drop,
                    record_noise_estimates: false,
                },
            )
            .unwrap();
            run.death_time.is_some()
        })
        .count();
    let freq = deaths as f64 / reps as f64;
    let p = 1.0 - 1.0 / 16.0;
    let sigma = (p * (1.0 - p) / reps as f64).sqrt();
    assert!((freq - p).abs() <= 3.0 * sigma, "death frequency {freq}");
}

#[test]
fn gaussian_sweep_gap_shrinks_with_particles() {
    let cfg = preset("gaussian").unwrap();
    let spec = cfg.spec.unwrap();
    let rows = gap_sweep(
        &spec,
        cfg.policy.as_ref().unwrap(),
        &RewardFunction::AvgL1,
        &[64, 4096],
        100,
        OracleKind::KalmanGaussian,
        &StreamKey::from_seed(0),
        None,
    )
    .unwrap();
    let gaps = |n: usize| median(rows.iter().filter(|r| r.n == n).map(|r| r.reward_gap.unwrap()).collect());
    let (g64, g4096) = (gaps(64), gaps(4096));
    println!("median gap N=64: {g64:.5}, N=4096: {g4096:.5}");
    assert!(g4096 < g64);
}

/// `max_t ‖ŷ_t - ỹ_t‖` on the enumeration preset with N = 10^5.
#[test]
fn enumeration_preset_estimates_track_the_posterior() {
    let cfg = preset("enumeration").unwrap();
    let spec = cfg.spec.unwrap();
    let g = cfg.policy.unwrap();
    let worst: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let key = StreamKey::from_seed(0).cell(0, seed as usize);
            let noise = draw_noise_path(&spec, key.derive(Domain::Environment, 0)).unwrap();
            let run = run_pf_planner(&spec, &g, 100_000, &key.derive(Domain::Particles, 0), noise, FilterOptions::default()).unwrap();
            assert!(run.death_time.is_none());
            let traj = &run.trajectory;
            let mut dag = EnumerationDag::new(&spec, 1 << 16).unwrap();
            let mut worst: f64 = 0.0;
            for t in 0..spec.horizon {
                dag.step(&spec, &traj.actions[t], &traj.observations[t]).unwrap();
                if t + 1 < run.estimates.len() {
                    worst = worst.max((&run.estimates[t + 1] - dag.filtering_mean(t + 1)).norm());
                }
            }
            worst
        })
        .collect();
    let good = worst.iter().filter(|&&w| w <= 0.05).count();
    println!("seeds with max error <= 0.05: {good}/100, largest {:.4}", worst.iter().cloned().fold(0.0, f64::max));
    assert!(good >= 95);
}

#[test]
fn concentration_exceedances_vanish_for_large_n() {
    let cfg = preset("enumeration").unwrap();
    let spec = cfg.spec.unwrap().truncated(3);
    let mut r = rng(3);
    let rec = random_record(&mut r, &spec, StreamKey::from_seed(3));
    let freq = |n: usize| {
        let params = ConcentrationParams {
            particles: n,
            beta: 0.05,
            beta_prime: 2.0,
            replications: 300,
            m: 1.0,
        };
        let rep = concentration_experiment(&spec, &rec.observations, &rec.actions, params, 1 << 16, &StreamKey::from_seed(4)).unwrap();
        rep.cells.iter().map(|c| c.frequency).fold(0.0, f64::max)
    };
    let (small, large) = (freq(20), freq(20_000));
    assert!(small > 0.0);
    assert_eq!(large, 0.0, "max frequency at N=2e4 is {large}, at N=20 {small}");
}

#[test]
fn zero_noise_reference_and_kalman_are_exact() {
    let s = SystemSpec::scalar(0.7, 1.0, 2.0, NoiseDistribution::zero(1), NoiseDistribution::zero(1), 1.5, 4);
    let mut r = rng(1);
    let rec = random_record(&mut r, &s, StreamKey::from_seed(1));
    let k = kalman_posterior_mean(&s, &rec.observations, &rec.actions).unwrap().mean;
    assert_eq!(k, rec.states[4]);
    for n in [1, 7] {
        let y = reference_filter_mean(&s, &rec.observations, &rec.actions, n, &StreamKey::from_seed(2)).unwrap();
        assert_eq!(y, rec.states[4]);
    }
    let _ = DVector::<f64>::zeros(1);
}
