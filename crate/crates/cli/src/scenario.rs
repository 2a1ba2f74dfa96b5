//! Mode dispatch: each mode runs the core library, writes its artifacts and
//! returns a report.

use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use edg_core::diagnostics::{
    conservation_report, estimate_gelation_time, probe_state, probe_weight,
    tail_identity_residual, GelationEstimate, GelationScan, IdentityResidualReport,
};
use edg_core::integrator::{ClipLedger, SolverStats};
use edg_core::stochastic::{
    compare_to_meanfield, simulate_ensemble, EmpiricalTrajectory, MeanFieldDistance,
    ParticleConfig,
};
use edg_core::{
    init_distribution, integrate, ClusterState, EdgError, IntegratorConfig, Kernel, Outcome,
    TailWeight, Trajectory,
};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, KernelConfig, Mode, ScenarioConfig};
use crate::report::{Artifacts, RunReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("wrong regime: {0}")]
    WrongRegime(String),
    #[error("invalid input: {0}")]
    Input(EdgError),
    #[error("numerical failure: {0}")]
    Numerical(EdgError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::WrongRegime(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<EdgError> for CliError {
    fn from(e: EdgError) -> Self {
        match e {
            EdgError::WrongRegime(msg) => CliError::WrongRegime(msg),
            EdgError::NonFiniteRhs { .. } | EdgError::RateOverflow => CliError::Numerical(e),
            other => CliError::Input(other),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// What a mode hands back to the report.
struct ModeResult {
    outcome: Outcome,
    collapse_time: Option<f64>,
    conservation: Option<edg_core::diagnostics::ConservationReport>,
}

impl ModeResult {
    fn completed() -> Self {
        Self {
            outcome: Outcome::Completed,
            collapse_time: None,
            conservation: None,
        }
    }
}

/// Runs `config`, writing every artifact into `out` before the report.
pub fn run_scenario(config: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    let clock = Instant::now();
    let mut art = Artifacts::create(out)?;
    let result = match config.mode {
        Mode::Run => run(config, &mut art)?,
        Mode::Convergence => convergence(config, &mut art)?,
        Mode::Gelscan => gelscan(config, &mut art)?,
        Mode::Blowup => blowup(config, &mut art)?,
        Mode::Mc => particles(config, &mut art, false)?,
        Mode::McCompare => particles(config, &mut art, true)?,
    };
    let report = RunReport {
        tool: "edg",
        version: env!("CARGO_PKG_VERSION"),
        mode: config.mode,
        seed: config.seed,
        config: config.clone(),
        outcome: result.outcome.to_string(),
        collapse_time: result.collapse_time,
        conservation: result.conservation,
        manifest: art.into_manifest(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    report.write(out)?;
    Ok(report)
}

fn kernel_of(config: &ScenarioConfig) -> Result<Kernel> {
    let kc: &KernelConfig = config
        .kernel
        .as_ref()
        .ok_or_else(|| ConfigError::Missing { key: "kernel.type".into() })?;
    Ok(kc.build()?)
}

fn solver_of(config: &ScenarioConfig) -> Result<&IntegratorConfig> {
    config
        .solver
        .as_ref()
        .ok_or_else(|| CliError::Config(ConfigError::Missing { key: "solver.t_end".into() }))
}

fn initial_of(config: &ScenarioConfig) -> Result<ClusterState> {
    let n = config
        .initial
        .n
        .ok_or_else(|| ConfigError::Missing { key: "ic.n".into() })?;
    Ok(init_distribution(&config.initial.spec, n)?)
}

/// Integrates, keeping the partial trajectory of a non-finite run.
fn integrate_keep(kernel: &Kernel, start: &ClusterState, cfg: &IntegratorConfig) -> Result<Trajectory> {
    match integrate(kernel, start, cfg) {
        Ok(tr) => Ok(tr),
        Err(EdgError::NonFiniteRhs { partial: Some(tr), .. }) => Ok(*tr),
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    outcome: Outcome,
    collapse_time: Option<f64>,
    final_time: f64,
    snapshots: usize,
    stats: SolverStats,
    clipped: ClipLedger,
    conservation: edg_core::diagnostics::ConservationReport,
    identities: &'a [IdentityResidualReport],
}

fn run(config: &ScenarioConfig, art: &mut Artifacts) -> Result<ModeResult> {
    let kernel = kernel_of(config)?;
    let solver = solver_of(config)?;
    let start = initial_of(config)?;
    let tr = integrate_keep(&kernel, &start, solver)?;

    art.emit("snapshots.csv", |w| tr.write_csv(w))?;
    art.emit("final.csv", |w| tr.last().write_csv(w))?;
    art.emit("moments.csv", |w| tr.moments.write_csv(w))?;
    if !config.diagnostics.tail_m.is_empty() {
        art.emit("tails.csv", |w| write_tails(w, &tr, &config.diagnostics.tail_m))?;
    }
    let identities = if config.diagnostics.identity_checks {
        config
            .diagnostics
            .tail_m
            .iter()
            .map(|&m| tail_identity_residual(&tr, &kernel, m))
            .collect::<edg_core::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let conservation = conservation_report(&tr);
    art.emit_json(
        "summary.json",
        &RunSummary {
            outcome: tr.outcome,
            collapse_time: tr.collapse_time,
            final_time: tr.last().t(),
            snapshots: tr.snapshots.len(),
            stats: tr.stats,
            clipped: tr.clipped,
            conservation,
            identities: &identities,
        },
    )?;
    Ok(ModeResult {
        outcome: tr.outcome,
        collapse_time: tr.collapse_time,
        conservation: Some(conservation),
    })
}

fn write_tails(w: &mut Vec<u8>, tr: &Trajectory, ms: &[usize]) -> io::Result<()> {
    writeln!(w, "t,m,count,linear_excess,quadratic_excess")?;
    for s in &tr.snapshots {
        for &m in ms {
            let sum = |weight| s.tail_weighted_sum(m, weight).unwrap_or(f64::NAN);
            writeln!(
                w,
                "{:e},{m},{:e},{:e},{:e}",
                s.t(),
                sum(TailWeight::Count),
                sum(TailWeight::LinearExcess),
                sum(TailWeight::QuadraticExcess)
            )?;
        }
    }
    Ok(())
}

/// One truncation order of a convergence sweep.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub t: f64,
    pub outcome: Outcome,
    /// `sum_{j > N/2} j c_j` at the final time.
    pub tail_mass_above_half: f64,
    pub m1_drift: f64,
}

#[derive(Serialize)]
struct ConvergenceSummary<'a> {
    rows: &'a [ConvergenceRow],
    tail_mass_decreasing: bool,
}

fn convergence(config: &ScenarioConfig, art: &mut Artifacts) -> Result<ModeResult> {
    let kernel = kernel_of(config)?;
    let mut solver = solver_of(config)?.clone();
    solver.record_every = if solver.t_end > 0.0 { solver.t_end } else { 1.0 };
    let runs = config
        .convergence_n
        .par_iter()
        .map(|&n| {
            let start = init_distribution(&config.initial.spec, n)?;
            let tr = integrate_keep(&kernel, &start, &solver)?;
            let last = tr.last();
            let tail = edg_core::summation::compensated_sum(
                last.c().iter().enumerate().skip(n / 2 + 1).map(|(j, v)| j as f64 * v),
            );
            Ok(ConvergenceRow {
                n,
                t: last.t(),
                outcome: tr.outcome,
                tail_mass_above_half: tail,
                m1_drift: conservation_report(&tr).max_m1_drift,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    art.emit("convergence.csv", |w| {
        writeln!(w, "n,t,outcome,tail_mass_above_half,m1_drift")?;
        for r in &runs {
            writeln!(w, "{},{:e},{},{:e},{:e}", r.n, r.t, r.outcome, r.tail_mass_above_half, r.m1_drift)?;
        }
        Ok(())
    })?;
    let decreasing = runs
        .windows(2)
        .all(|p| p[1].tail_mass_above_half < p[0].tail_mass_above_half);
    art.emit_json(
        "summary.json",
        &ConvergenceSummary {
            rows: &runs,
            tail_mass_decreasing: decreasing,
        },
    )?;
    let stopped = runs.iter().find(|r| r.outcome != Outcome::Completed);
    Ok(ModeResult {
        outcome: stopped.map_or(Outcome::Completed, |r| r.outcome),
        collapse_time: None,
        conservation: None,
    })
}

/// One point of a gelation scan grid.
#[derive(Clone, Debug, Serialize)]
pub struct GelscanPoint {
    pub mu: f64,
    pub nu: f64,
    pub kernel: String,
    #[serde(flatten)]
    pub estimate: GelationEstimate,
}

fn gelscan(config: &ScenarioConfig, art: &mut Artifacts) -> Result<ModeResult> {
    let g = config
        .gelscan
        .as_ref()
        .ok_or_else(|| ConfigError::Missing { key: "gelscan.mu".into() })?;
    let solver = solver_of(config)?;
    let mut scan = GelationScan::new(g.threshold, solver.clone());
    scan.increase_per_doubling = g.increase_per_doubling;
    scan.stable_per_doubling = g.stable_per_doubling;

    let mut points = Vec::with_capacity(g.mu.len());
    for (i, &mu) in g.mu.iter().enumerate() {
        let nu = g.nu.get(i).copied().unwrap_or(mu);
        // symmetric family: (jk)^mu on the diagonal, j^mu k^nu + j^nu k^mu off it
        let kernel = if mu == nu {
            Kernel::product(mu, g.classical)?
        } else {
            Kernel::symmetric_sum(mu, nu, g.classical)?
        };
        let estimate = estimate_gelation_time(&kernel, &config.initial.spec, &g.n_list, &scan)?;
        points.push(GelscanPoint {
            mu,
            nu,
            kernel: kernel.name().to_string(),
            estimate,
        });
    }
    art.emit("gelscan.csv", |w| {
        writeln!(w, "mu,nu,n,t_star,censored,collapsed")?;
        for p in &points {
            for c in &p.estimate.t_star {
                writeln!(w, "{},{},{},{:e},{},{}", p.mu, p.nu, c.n, c.t_star, c.censored, c.collapsed)?;
            }
        }
        Ok(())
    })?;
    art.emit_json("summary.json", &points)?;
    Ok(ModeResult::completed())
}

fn blowup(config: &ScenarioConfig, art: &mut Artifacts) -> Result<ModeResult> {
    let b = config
        .blowup
        .as_ref()
        .ok_or_else(|| ConfigError::Missing { key: "blowup.m_list".into() })?;
    let kernel = kernel_of(config)?;
    let label = kernel.classify().label;
    if !b.control && !label.is_nonexistence_risk() {
        return Err(CliError::WrongRegime(format!(
            "{} is classified {label}; set blowup.control = true for a control run",
            kernel.name()
        )));
    }
    let start = initial_of(config)?;
    let report = probe_state(&kernel, &start, &b.m_list, solver_of(config)?, probe_weight(label))?;
    art.emit("blowup.csv", |w| {
        writeln!(w, "m,initial,last,factor,initial_rate")?;
        for g in &report.growth {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", g.m, g.initial, g.last, g.factor, g.initial_rate)?;
        }
        Ok(())
    })?;
    art.emit_json("summary.json", &report)?;
    Ok(ModeResult {
        outcome: report.outcome,
        collapse_time: report.collapse_time,
        conservation: None,
    })
}

/// Site masses matching the occupied fractions of the configured start:
/// `round(c_j L)` sites of mass `j`, the rest empty.
pub fn particle_start(state: &ClusterState, sites: usize, seed: u64) -> Result<ParticleConfig> {
    let mut masses = Vec::with_capacity(sites);
    for (j, &c) in state.c().iter().enumerate().skip(1) {
        let count = (c * sites as f64).round() as usize;
        masses.extend(std::iter::repeat_n(j as u64, count));
    }
    if masses.len() > sites {
        return Err(CliError::Input(EdgError::InvalidParameter(format!(
            "start needs {} occupied sites but only {sites} exist",
            masses.len()
        ))));
    }
    masses.resize(sites, 0);
    Ok(ParticleConfig::new(masses, seed))
}

fn write_mean(w: &mut Vec<u8>, mean: &EmpiricalTrajectory) -> io::Result<()> {
    writeln!(w, "t,j,c")?;
    for (t, row) in mean.times.iter().zip(&mean.fractions) {
        for (j, v) in row.iter().enumerate() {
            writeln!(w, "{t:e},{j},{v:e}")?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ParticleSummary<'a> {
    sites: usize,
    replicas: usize,
    total_mass: u64,
    events: u64,
    snapshot_times: &'a [f64],
    ode_outcome: Option<Outcome>,
    distances: &'a [MeanFieldDistance],
}

fn particles(config: &ScenarioConfig, art: &mut Artifacts, compare: bool) -> Result<ModeResult> {
    let mc = config
        .mc
        .as_ref()
        .ok_or_else(|| ConfigError::Missing { key: "mc.sites".into() })?;
    let kernel = kernel_of(config)?;
    let start = initial_of(config)?;
    let particles = particle_start(&start, mc.sites, config.seed)?;
    let ensemble = simulate_ensemble(&kernel, &particles, mc.t_end, mc.snapshot_every, mc.replicas)?;
    art.emit("mc.csv", |w| ensemble.write_csv(w))?;
    art.emit("mc_mean.csv", |w| write_mean(w, &ensemble.mean))?;

    let mut result = ModeResult::completed();
    let mut distances = Vec::new();
    let mut ode_outcome = None;
    if compare {
        let tr = integrate_keep(&kernel, &start, solver_of(config)?)?;
        art.emit("ode.csv", |w| tr.write_csv(w))?;
        ode_outcome = Some(tr.outcome);
        result.outcome = tr.outcome;
        result.collapse_time = tr.collapse_time;
        result.conservation = Some(conservation_report(&tr));
        if tr.outcome == Outcome::Completed {
            distances = compare_to_meanfield(&ensemble.mean, &tr)?;
            art.emit("distance.csv", |w| {
                writeln!(w, "t,total_variation,sup")?;
                for d in &distances {
                    writeln!(w, "{:e},{:e},{:e}", d.t, d.total_variation, d.sup)?;
                }
                Ok(())
            })?;
        }
    }
    art.emit_json(
        "summary.json",
        &ParticleSummary {
            sites: mc.sites,
            replicas: mc.replicas,
            total_mass: particles.total_mass(),
            events: ensemble.mean.events,
            snapshot_times: &ensemble.mean.times,
            ode_outcome,
            distances: &distances,
        },
    )?;
    Ok(result)
}
