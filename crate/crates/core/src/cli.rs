//! The `pfplan` command-line harness.
//!
//! Every command resolves a [`RunConfig`] (from `--config`, `--preset`, or the
//! command's default preset), applies the `--seed`, `--jobs` and `--out`
//! overrides, and writes CSV with a header row. Missing values are empty
//! fields. Sweep cell `(N index i, seed index j)` draws all of its randomness
//! from `master.cell(i, j)`, where `master` is the key of the master seed, so
//! any single cell can be reproduced on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    action_gap_measure, bound_calculator, coupling_identity_error, decompose_state, delta_nonlinear_from_sums,
    estimate_assumption_constants, particle_replay_error, reconstruction_error, sigma_a, sigma_ab, BoundReport,
    BoundVariant, ConcentrationParams,
};
use crate::config::RunConfig;
use crate::coupled::{gap_sweep, run_coupled, CoupledOptions, SweepRow};
use crate::error::{Error, Result};
use crate::linalg::rel_diff;
use crate::lowerbound::{build_lowerbound_process, run_death_experiment, DeathReport};
use crate::model::SystemSpec;
use crate::noise::{mgf_bound_check, NoiseKind};
use crate::oracle::{OracleKind, DEFAULT_MAX_PATHS};
use crate::pf::{HistoryPolicy, ParticleEnsemble};
use crate::presets;
use crate::rng::{Domain, StreamKey};

const EXPERIMENT_HELP: &str = "\
Per-run CSV columns:
  run_id, N, T, seed, regret, ideal_regret, reward_gap, died_at, wall_time_ms
regret and ideal_regret are the configured reward of the particle-filter
planner and of the exact-posterior planner on the same noise; both are empty
when the particles died (died_at is the step at which every weight hit zero).
The summary (printed to stderr, and written next to --out as *.summary.csv)
has one row per (N, T):
  N, T, runs, deaths, mean_regret, std_regret, mean_ideal_regret,
  std_ideal_regret, mean_gap
std_* are sample standard deviations over the runs that survived.";

const SWEEP_HELP: &str = "\
CSV columns:
  run_id, N, seed, T, reward_gap, reward_approx, reward_ideal, died_at, wall_time_ms
reward_gap = |reward_approx - reward_ideal|; empty after particle death.";

const LOWERBOUND_HELP: &str = "\
CSV columns:
  T, N, exact, empirical, bound_1_over_k, pass
exact = 1 - (1 - 2^-T)^N is the survival probability of N particles on the
conditioned record; bound_1_over_k is empty unless N <= 2^T / (2k).";

const BOUNDS_HELP: &str = "\
CSV columns:
  variant, T, p, sigma_a, sigma_ab, sigma_ab_bar, delta, n_expression, log_factor, stable_n
n_expression = T^2 delta^2 d / (m eps^2 p); the log factor ln(dT/delta) is reported separately.";

const VALIDATE_HELP: &str = "\
Runs the invariant suite on the selected config (all presets when none is
given) and prints one PASS/FAIL/SKIP line per property. With --out the same
lines are written as CSV: source, property, status, detail.";

#[derive(Debug, Parser)]
#[command(name = "pfplan", version, about = "Particle-filter planning experiments on partially observed linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in config: appendix-c, gaussian, enumeration, lowerbound, zero-noise.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Master seed (overrides [run].master_seed).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "INT")]
    pub jobs: Option<usize>,
    /// Output CSV path (default: stdout).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write a gnuplot script that plots the CSV given by --out.
    #[arg(long, global = true, value_name = "PATH")]
    pub emit_gnuplot_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Regret of the planner over an N grid (default preset: appendix-c).
    #[command(after_help = EXPERIMENT_HELP)]
    Experiment,
    /// Coupled reward gaps over an N x seed grid (default preset: gaussian).
    #[command(after_help = SWEEP_HELP)]
    Sweep,
    /// Particle death on the hard instance over a (T, N) grid.
    #[command(after_help = LOWERBOUND_HELP)]
    Lowerbound,
    /// Invariant suite; exits 1 on any failure.
    #[command(after_help = VALIDATE_HELP)]
    Validate,
    /// Particle-count expressions for the configured constants.
    #[command(after_help = BOUNDS_HELP)]
    Bounds,
}

impl Command {
    fn default_preset(&self) -> &'static str {
        match self {
            Command::Experiment => "appendix-c",
            Command::Sweep => "gaussian",
            Command::Lowerbound | Command::Bounds | Command::Validate => "lowerbound",
        }
    }
}

/// Loads the config selected by the flags and applies the overrides.
pub fn resolve_config(command: Command, args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --config or --preset, not both".into())),
        (Some(path), None) => RunConfig::from_path(path)?,
        (None, Some(name)) => presets::preset(name)?,
        (None, None) => presets::preset(command.default_preset())?,
    };
    apply_overrides(&mut cfg, args)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, args: &CommonArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        cfg.jobs = Some(jobs);
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    Ok(())
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidParameter(format!("csv: {e}")))
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn check_row(row: &SweepRow) -> Result<()> {
    match &row.error {
        Some(e) => Err(Error::InvalidParameter(format!("run N={} seed={} T={}: {e}", row.n, row.seed, row.horizon))),
        None => Ok(()),
    }
}

fn sweep_all_horizons(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let policy = cfg.require_policy()?;
    let n_list = cfg.require_n_list()?;
    cfg.require_spec()?.ensure_valid()?;
    let master = StreamKey::from_seed(cfg.master_seed);
    let mut rows = Vec::new();
    for &t in &cfg.horizons {
        let spec = cfg.spec_at(t)?;
        spec.ensure_valid()?;
        let oracle = cfg.oracle.resolve(&spec);
        let cell_rows = gap_sweep(&spec, policy, &cfg.reward, n_list, cfg.seeds, oracle, &master, cfg.jobs)?;
        for r in &cell_rows {
            check_row(r)?;
        }
        rows.extend(cell_rows);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub run_id: usize,
    pub n: usize,
    pub horizon: usize,
    pub seed: usize,
    pub regret: Option<f64>,
    pub ideal_regret: Option<f64>,
    pub reward_gap: Option<f64>,
    pub died_at: Option<usize>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub horizon: usize,
    pub runs: usize,
    pub deaths: usize,
    pub mean_regret: Option<f64>,
    pub std_regret: Option<f64>,
    pub mean_ideal_regret: Option<f64>,
    pub std_ideal_regret: Option<f64>,
    pub mean_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ExperimentRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutput {
    pub fn summary_for(&self, n: usize, horizon: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.n == n && s.horizon == horizon)
    }

    pub fn csv(&self) -> Result<String> {
        to_csv(
            &["run_id", "N", "T", "seed", "regret", "ideal_regret", "reward_gap", "died_at", "wall_time_ms"],
            self.rows.iter().map(|r| {
                vec![
                    r.run_id.to_string(),
                    r.n.to_string(),
                    r.horizon.to_string(),
                    r.seed.to_string(),
                    fmt_opt(r.regret),
                    fmt_opt(r.ideal_regret),
                    fmt_opt(r.reward_gap),
                    fmt_opt(r.died_at),
                    format!("{:.3}", r.wall_time_ms),
                ]
            }),
        )
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(
            &[
                "N",
                "T",
                "runs",
                "deaths",
                "mean_regret",
                "std_regret",
                "mean_ideal_regret",
                "std_ideal_regret",
                "mean_gap",
            ],
            self.summary.iter().map(|s| {
                vec![
                    s.n.to_string(),
                    s.horizon.to_string(),
                    s.runs.to_string(),
                    s.deaths.to_string(),
                    fmt_opt(s.mean_regret),
                    fmt_opt(s.std_regret),
                    fmt_opt(s.mean_ideal_regret),
                    fmt_opt(s.std_ideal_regret),
                    fmt_opt(s.mean_gap),
                ]
            }),
        )
    }
}

/// Regret of the approximate and ideal planners for every `(T, N, seed)`.
pub fn experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let sweep = sweep_all_horizons(cfg)?;
    let rows: Vec<ExperimentRow> = sweep
        .iter()
        .enumerate()
        .map(|(run_id, r)| ExperimentRow {
            run_id,
            n: r.n,
            horizon: r.horizon,
            seed: r.seed,
            regret: r.reward_approx,
            ideal_regret: r.reward_ideal,
            reward_gap: r.reward_gap,
            died_at: r.died_at,
            wall_time_ms: r.wall_time_ms,
        })
        .collect();
    let mut summary = Vec::new();
    for &t in &cfg.horizons {
        for &n in &cfg.n_list {
            let cell: Vec<_> = rows.iter().filter(|r| r.n == n && r.horizon == t).collect();
            let regrets: Vec<f64> = cell.iter().filter_map(|r| r.regret).collect();
            let ideal: Vec<f64> = cell.iter().filter(|r| r.regret.is_some()).filter_map(|r| r.ideal_regret).collect();
            let gaps: Vec<f64> = cell.iter().filter_map(|r| r.reward_gap).collect();
            let (mean_regret, std_regret) = mean_std(&regrets);
            let (mean_ideal_regret, std_ideal_regret) = mean_std(&ideal);
            summary.push(SummaryRow {
                n,
                horizon: t,
                runs: cell.len(),
                deaths: cell.iter().filter(|r| r.died_at.is_some()).count(),
                mean_regret,
                std_regret,
                mean_ideal_regret,
                std_ideal_regret,
                mean_gap: mean_std(&gaps).0,
            });
        }
    }
    Ok(ExperimentOutput { rows, summary })
}

/// Coupled-run reward gaps, one row per `(T, N, seed)` cell.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    sweep_all_horizons(cfg)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    to_csv(
        &["run_id", "N", "seed", "T", "reward_gap", "reward_approx", "reward_ideal", "died_at", "wall_time_ms"],
        rows.iter().enumerate().map(|(i, r)| {
            vec![
                i.to_string(),
                r.n.to_string(),
                r.seed.to_string(),
                r.horizon.to_string(),
                fmt_opt(r.reward_gap),
                fmt_opt(r.reward_approx),
                fmt_opt(r.reward_ideal),
                fmt_opt(r.died_at),
                format!("{:.3}", r.wall_time_ms),
            ]
        }),
    )
}

/// Largest `N` the lower-bound command will simulate.
const MAX_LOWERBOUND_PARTICLES: u128 = 1 << 24;

/// Death experiment over the `(T, N)` grid; cell `(i, j)` uses `master.cell(i, j)`.
pub fn lowerbound(cfg: &RunConfig) -> Result<Vec<DeathReport>> {
    let o = &cfg.lowerbound;
    let master = StreamKey::from_seed(cfg.master_seed);
    let mut reports = Vec::new();
    crate::coupled::with_jobs(cfg.jobs, || -> Result<()> {
        for (i, &t) in o.horizons.iter().enumerate() {
            let inst = build_lowerbound_process(t)?;
            let mut grid = o.particles.clone();
            if o.include_k_cell {
                let n_k = inst.max_particles_for(o.k);
                if n_k >= 1 && n_k <= MAX_LOWERBOUND_PARTICLES && !grid.contains(&(n_k as usize)) {
                    grid.push(n_k as usize);
                }
            }
            for (j, &n) in grid.iter().enumerate() {
                reports.push(run_death_experiment(t, n, o.replications, o.k, &master.cell(i, j))?);
            }
        }
        Ok(())
    })??;
    Ok(reports)
}

pub fn lowerbound_csv(reports: &[DeathReport]) -> Result<String> {
    to_csv(
        &["T", "N", "exact", "empirical", "bound_1_over_k", "pass"],
        reports.iter().map(|r| {
            vec![
                r.horizon.to_string(),
                r.particles.to_string(),
                r.exact.to_string(),
                r.empirical.to_string(),
                fmt_opt(r.bound_1_over_k),
                r.pass.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub horizon: usize,
    pub p: f64,
    pub report: BoundReport,
}

pub fn bounds(cfg: &RunConfig) -> Result<Vec<BoundsRow>> {
    let mut rows = Vec::new();
    for variant in cfg.bounds.variants()? {
        for &t in &cfg.bounds.horizons {
            let params = cfg.bounds.params(t);
            rows.push(BoundsRow {
                horizon: t,
                p: params.p,
                report: bound_calculator(&params, variant)?,
            });
        }
    }
    Ok(rows)
}

pub fn bounds_csv(rows: &[BoundsRow]) -> Result<String> {
    to_csv(
        &[
            "variant",
            "T",
            "p",
            "sigma_a",
            "sigma_ab",
            "sigma_ab_bar",
            "delta",
            "n_expression",
            "log_factor",
            "stable_n",
        ],
        rows.iter().map(|r| {
            let b = &r.report;
            let delta = match b.variant {
                BoundVariant::Nonlinear => b.delta_nonlinear,
                BoundVariant::Linear => b.delta_linear,
            };
            vec![
                b.variant.name().to_string(),
                r.horizon.to_string(),
                r.p.to_string(),
                b.sigma_a.to_string(),
                b.sigma_ab.to_string(),
                b.sigma_ab_bar.to_string(),
                delta.to_string(),
                b.n_expression.to_string(),
                b.log_factor.to_string(),
                b.stable_n.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

impl CheckStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skip => "SKIP",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub source: String,
    pub property: String,
    pub status: CheckStatus,
    pub detail: String,
}

impl Check {
    fn new(source: &str, property: &str, pass: bool, detail: String) -> Self {
        Check {
            source: source.into(),
            property: property.into(),
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        }
    }

    fn skip(source: &str, property: &str, detail: &str) -> Self {
        Check {
            source: source.into(),
            property: property.into(),
            status: CheckStatus::Skip,
            detail: detail.into(),
        }
    }
}

/// Particles used by the identity checks of `validate`.
const VALIDATE_PARTICLES: usize = 256;

fn max_paths_of(kind: OracleKind) -> usize {
    match kind {
        OracleKind::EnumerationFiniteSupport { max_paths } => max_paths,
        _ => DEFAULT_MAX_PATHS,
    }
}

/// Runs the invariant suite on one config.
pub fn validate_config(source: &str, cfg: &RunConfig) -> Vec<Check> {
    let mut out = Vec::new();
    if let Some(spec) = &cfg.spec {
        let report = spec.validate();
        out.push(Check::new(source, "system spec", report.is_valid(), report.to_string()));
        if report.is_valid() {
            system_checks(source, cfg, spec, &mut out);
        }
    }
    if let Some(c) = &cfg.concentration {
        let m = c.m.or_else(|| cfg.spec.as_ref().and_then(|s| s.transition_noise_seq.first()?.subgaussian_m()));
        for &n in &c.particles {
            let params = ConcentrationParams {
                particles: n,
                beta: c.beta,
                beta_prime: c.beta_prime_for(n),
                replications: c.replications,
                m: m.unwrap_or(f64::NAN),
            };
            let r = params.validate();
            out.push(Check::new(
                source,
                &format!("concentration preconditions N={n}"),
                r.is_ok(),
                r.err().map_or_else(|| "beta <= 1/2, beta' > 1".to_string(), |e| e.to_string()),
            ));
        }
    }
    match cfg.bounds.variants() {
        Ok(variants) => {
            let mut errors = Vec::new();
            for v in variants {
                for &t in &cfg.bounds.horizons {
                    if let Err(e) = bound_calculator(&cfg.bounds.params(t), v) {
                        errors.push(format!("{} T={t}: {e}", v.name()));
                    }
                }
            }
            out.push(Check::new(source, "bound parameters", errors.is_empty(), errors.join("; ")));
        }
        Err(e) => out.push(Check::new(source, "bound parameters", false, e.to_string())),
    }
    out
}

fn system_checks(source: &str, cfg: &RunConfig, spec: &SystemSpec, out: &mut Vec<Check>) {
    let mgf_key = StreamKey::from_seed(cfg.master_seed).derive(Domain::MgfCheck, 0);
    let declared: Vec<_> = spec.transition_noise_seq.iter().filter_map(|n| n.subgaussian_m().map(|m| (n, m))).collect();
    if declared.is_empty() {
        out.push(Check::skip(source, "sub-Gaussian declaration", "no m declared"));
    } else {
        let failed: Vec<_> = declared
            .iter()
            .map(|(n, m)| mgf_bound_check(n, *m, 2000, &mgf_key))
            .filter(|r| !r.passed)
            .map(|r| format!("m={} max ratio {:.6}", r.m_candidate, r.max_ratio))
            .collect();
        out.push(Check::new(source, "sub-Gaussian declaration", failed.is_empty(), failed.join("; ")));
    }
    let Some(policy) = &cfg.policy else {
        out.push(Check::skip(source, "coupled identities", "no [policy] section"));
        return;
    };
    if policy.action_dim() != spec.action_dim {
        out.push(Check::new(
            source,
            "policy dimensions",
            false,
            format!("policy outputs {} actions, system takes {}", policy.action_dim(), spec.action_dim),
        ));
        return;
    }
    let oracle = cfg.oracle.resolve(spec);
    let key = StreamKey::from_seed(cfg.master_seed).derive(Domain::Auxiliary, 0);
    let options = CoupledOptions {
        history: HistoryPolicy::Keep,
        record_noise: true,
    };
    let run = match run_coupled(spec, policy, &cfg.reward, VALIDATE_PARTICLES, oracle, &key, options) {
        Ok(r) => r,
        Err(e) => {
            out.push(Check::new(source, "coupled run", false, e.to_string()));
            return;
        }
    };

    let mut worst: f64 = 0.0;
    for traj in [&run.approx, &run.ideal] {
        for t in 0..=traj.steps() {
            match decompose_state(spec, &traj.actions, &traj.transition_noises, t) {
                Ok(x) => worst = worst.max(rel_diff(&x, &traj.states[t])),
                Err(_) => worst = f64::INFINITY,
            }
        }
    }
    out.push(Check::new(source, "state decomposition", worst <= 1e-12, format!("max rel err {worst:.3e}")));

    let mut ens = ParticleEnsemble::new(spec, VALIDATE_PARTICLES, HistoryPolicy::Keep);
    let mut recon: f64 = 0.0;
    let mut replay: f64 = 0.0;
    let mut note = String::new();
    if let Ok(ens) = ens.as_mut() {
        let pkey = key.derive(Domain::Particles, 1);
        for t in 0..run.approx.steps() {
            if let Err(e) = ens.step(spec, &run.approx.actions[t], &run.approx.observations[t], &pkey) {
                note = format!("stopped at t={}: {e}", t + 1);
                break;
            }
            match (reconstruction_error(spec, ens), particle_replay_error(spec, ens)) {
                (Ok(a), Ok(b)) => {
                    recon = recon.max(a);
                    replay = replay.max(b);
                }
                _ => {
                    recon = f64::INFINITY;
                    break;
                }
            }
        }
    }
    out.push(Check::new(
        source,
        "estimate reconstruction",
        recon <= 1e-9 && replay <= 1e-12,
        format!("max rel err {recon:.3e}, particle replay {replay:.3e} {note}").trim_end().to_string(),
    ));

    out.push(Check::new(
        source,
        "divergence attribution",
        run.attribution_error <= 1e-9,
        format!("max rel err {:.3e}", run.attribution_error),
    ));

    let atomic_transitions = spec.transition_noise_seq.iter().all(|n| n.kind() == NoiseKind::Atomic);
    if atomic_transitions {
        match coupling_identity_error(spec, &run.approx, &run.ideal, max_paths_of(oracle)) {
            Ok(e) => out.push(Check::new(source, "coupling identity", e <= 1e-12, format!("max rel err {e:.3e}"))),
            Err(Error::PathBudgetExceeded { .. }) => out.push(Check::skip(source, "coupling identity", "path budget exceeded")),
            Err(e) => out.push(Check::new(source, "coupling identity", false, e.to_string())),
        }
    } else {
        out.push(Check::skip(source, "coupling identity", "transition noise is not finite-support"));
    }

    if run.ideal_noise_means.is_empty() {
        out.push(Check::skip(source, "action-gap envelope", "oracle does not expose noise posteriors"));
    } else {
        let constants = estimate_assumption_constants(spec, policy, 1.0, 1.0);
        match action_gap_measure(&run, &constants) {
            Ok(r) => out.push(Check::new(
                source,
                "action-gap envelope",
                r.violations.is_empty(),
                if r.violations.is_empty() {
                    format!("{} steps", r.gaps.len())
                } else {
                    format!("violations at t = {:?}", r.violations)
                },
            )),
            Err(e) => out.push(Check::new(source, "action-gap envelope", false, e.to_string())),
        }
    }
}

/// Hand-computed regressions of the bound arithmetic.
pub fn bound_regressions() -> Vec<Check> {
    let src = "builtin";
    let mut out = vec![
        Check::new(src, "sigma_a(C_a=1, rho=1, T=3) = 3", sigma_a(1.0, 1.0, 3) == 3.0, sigma_a(1.0, 1.0, 3).to_string()),
        Check::new(src, "sigma_ab(c=1, k=2) = 2", sigma_ab(1.0, 2) == 2.0, sigma_ab(1.0, 2).to_string()),
    ];
    let d = delta_nonlinear_from_sums(1.0, 1.0, 1.0, 3.0, 2.0);
    out.push(Check::new(src, "delta_3 = 36", d == 36.0, d.to_string()));
    let p = crate::config::BoundsOptions {
        c_a: 0.5,
        c_b: 0.5,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for t in [4usize, 8, 16, 32] {
        match (
            bound_calculator(&p.params(t), BoundVariant::Nonlinear),
            bound_calculator(&p.params(2 * t), BoundVariant::Nonlinear),
        ) {
            (Ok(a), Ok(b)) => worst = worst.max(b.n_expression / a.n_expression),
            _ => ok = false,
        }
    }
    out.push(Check::new(
        src,
        "polynomial growth N(2T)/N(T) <= 2^8",
        ok && worst <= 256.0,
        format!("max ratio {worst:.3}"),
    ));
    out
}

pub fn checks_text(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(s, "{}  {}  {}  {}", c.status.label(), c.source, c.property, c.detail);
    }
    s
}

pub fn checks_csv(checks: &[Check]) -> Result<String> {
    to_csv(
        &["source", "property", "status", "detail"],
        checks
            .iter()
            .map(|c| vec![c.source.clone(), c.property.clone(), c.status.label().to_string(), c.detail.clone()]),
    )
}

fn gnuplot_script(command: Command, data: &Path) -> Option<String> {
    let d = data.display();
    let out = match command {
        Command::Experiment => format!(
            "set datafile separator ','\nset logscale x\nset xlabel 'particles N'\nset ylabel 'regret'\n\
             set key top right\nplot '{d}' every ::1 using 1:5:6 with yerrorlines title 'particle filter', \\\n     \
             '{d}' every ::1 using 1:7:8 with yerrorlines title 'exact posterior'\n"
        ),
        Command::Sweep => format!(
            "set datafile separator ','\nset logscale x\nset xlabel 'particles N'\nset ylabel 'reward gap'\n\
             plot '{d}' every ::1 using 2:5 with points title 'reward gap'\n"
        ),
        Command::Lowerbound => format!(
            "set datafile separator ','\nset logscale x\nset xlabel 'particles N'\nset ylabel 'survival'\n\
             plot '{d}' every ::1 using 2:4 with points title 'empirical', \\\n     \
             '{d}' every ::1 using 2:3 with points title 'exact'\n"
        ),
        Command::Bounds => format!(
            "set datafile separator ','\nset logscale y\nset xlabel 'T'\nset ylabel 'N expression'\n\
             plot '{d}' every ::1 using 2:8 with points title 'N expression'\n"
        ),
        Command::Validate => return None,
    };
    Some(out)
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))
}

fn emit(cfg: &RunConfig, body: &str) -> Result<()> {
    match &cfg.out {
        Some(p) => write_file(p, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let started = Instant::now();
    let command = cli.command;
    if command == Command::Validate {
        return execute_validate(&cli.common);
    }
    let cfg = resolve_config(command, &cli.common)?;
    if cli.common.emit_gnuplot_script.is_some() && cfg.out.is_none() {
        return Err(Error::Config("--emit-gnuplot-script needs --out (the script plots that file)".into()));
    }
    let mut plotted = cfg.out.clone();
    let ok = match command {
        Command::Experiment => {
            let out = experiment(&cfg)?;
            emit(&cfg, &out.csv()?)?;
            let summary = out.summary_csv()?;
            eprint!("{summary}");
            if let Some(p) = &cfg.out {
                let sp = summary_path(p);
                write_file(&sp, &summary)?;
                plotted = Some(sp);
            }
            true
        }
        Command::Sweep => {
            let rows = sweep(&cfg)?;
            emit(&cfg, &sweep_csv(&rows)?)?;
            true
        }
        Command::Lowerbound => {
            let reports = lowerbound(&cfg)?;
            emit(&cfg, &lowerbound_csv(&reports)?)?;
            for r in reports.iter().filter(|r| !r.pass) {
                eprintln!(
                    "FAIL T={} N={}: empirical {} vs exact {} (sigma {})",
                    r.horizon, r.particles, r.empirical, r.exact, r.sigma
                );
            }
            reports.iter().all(|r| r.pass)
        }
        Command::Bounds => {
            let rows = bounds(&cfg)?;
            emit(&cfg, &bounds_csv(&rows)?)?;
            for r in &rows {
                eprintln!(
                    "{:<9} T={:<4} N ~ {:.6e} (x log factor {:.4}), stable-system {:.6e}",
                    r.report.variant.name(),
                    r.horizon,
                    r.report.n_expression,
                    r.report.log_factor,
                    r.report.stable_n
                );
            }
            true
        }
        Command::Validate => unreachable!(),
    };
    if let (Some(script), Some(data)) = (&cli.common.emit_gnuplot_script, &plotted) {
        if let Some(body) = gnuplot_script(command, data) {
            write_file(script, &body)?;
        }
    }
    eprintln!("done in {:.2} s", started.elapsed().as_secs_f64());
    Ok(ok)
}

fn execute_validate(args: &CommonArgs) -> Result<bool> {
    let mut checks = bound_regressions();
    if args.config.is_some() || args.preset.is_some() {
        let cfg = resolve_config(Command::Validate, args)?;
        let source = args
            .config
            .as_ref()
            .map(|p| p.display().to_string())
            .or_else(|| args.preset.clone())
            .unwrap_or_default();
        checks.extend(validate_config(&source, &cfg));
    } else {
        for name in presets::NAMES {
            let mut cfg = presets::preset(name)?;
            apply_overrides(&mut cfg, args)?;
            checks.extend(validate_config(name, &cfg));
        }
    }
    print!("{}", checks_text(&checks));
    if let Some(out) = &args.out {
        write_file(out, &checks_csv(&checks)?)?;
    }
    Ok(checks.iter().all(|c| c.status != CheckStatus::Fail))
}
