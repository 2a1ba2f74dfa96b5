//! Post-hoc checks on trajectories: conservation drift, integrated tail
//! identities, gelation-time scans over truncation orders, and tail-growth
//! probes for kernels without global solutions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EdgError, Result};
use crate::integrator::{integrate, Advance, IntegratorConfig, Outcome, Stepper, Trajectory};
use crate::kernel::{Kernel, RegimeLabel};
use crate::rhs::{flux_from_sums, ExchangeSums, RhsPlan};
use crate::state::{init_distribution, moment_of, tail_sum, ClusterState, InitialSpec, TailWeight};
use crate::summation::compensated_sum;

/// Maximum conservation drift over a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    /// `max_t |M_0(t) - M_0(0)| / M_0(0)` (absolute when `M_0(0) = 0`).
    pub max_m0_drift: f64,
    /// Same for `M_1`.
    pub max_m1_drift: f64,
    pub clipped_volume: f64,
    pub clipped_mass: f64,
}

pub fn conservation_report(trajectory: &Trajectory) -> ConservationReport {
    let first = trajectory.initial().c();
    let (m0, m1) = (moment_of(first, 0.0), moment_of(first, 1.0));
    let rel = |x: f64, reference: f64| if reference > 0.0 { x / reference } else { x };
    let mut d0: f64 = 0.0;
    let mut d1: f64 = 0.0;
    for s in &trajectory.snapshots {
        d0 = d0.max((moment_of(s.c(), 0.0) - m0).abs());
        d1 = d1.max((moment_of(s.c(), 1.0) - m1).abs());
    }
    ConservationReport {
        max_m0_drift: rel(d0, m0),
        max_m1_drift: rel(d1, m1),
        clipped_volume: trajectory.clipped.volume,
        clipped_mass: trajectory.clipped.mass,
    }
}

/// One integrated tail identity at a fixed `m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailResidual {
    pub weight: TailWeight,
    /// `max_t |LHS(t) - RHS(t)|` over the recorded snapshots.
    pub residual: f64,
    /// Both sides at the final snapshot.
    pub lhs_final: f64,
    pub rhs_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidualReport {
    pub m: usize,
    /// Largest spacing of the recorded times.
    pub cadence: f64,
    /// Count, linear-excess and quadratic-excess identities, in that order.
    pub residuals: Vec<TailResidual>,
}

impl IdentityResidualReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.residual).fold(0.0, f64::max)
    }
}

const WEIGHTS: [TailWeight; 3] = [
    TailWeight::Count,
    TailWeight::LinearExcess,
    TailWeight::QuadraticExcess,
];

/// Time derivative of `sum_{j>=m} w_j c_j` written through the flux:
/// `I_{m-1}`, `sum_{j>=m} I_j` and `sum_{j>=m} (2j+1) I_j`.
fn tail_rates(flux: &[f64], m: usize) -> [f64; 3] {
    let count = if m == 0 { 0.0 } else { flux[m - 1] };
    let linear = compensated_sum(flux.iter().skip(m).copied());
    let quadratic = compensated_sum(
        flux.iter()
            .enumerate()
            .skip(m)
            .map(|(j, v)| (2 * j + 1) as f64 * v),
    );
    [count, linear, quadratic]
}

/// Time-quadrature rule for the integrated identities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// Plain trapezoid rule; error `O(h^2)`.
    Trapezoid,
    /// Trapezoid plus the endpoint-derivative correction
    /// `h^2/12 (f'(a) - f'(b))`, with `f'` evaluated exactly from the
    /// snapshot; error `O(h^4)`.
    #[default]
    CorrectedTrapezoid,
}

/// Checks the integrated tail identities
///
/// ```text
/// sum_{j>=m} c_j(t)        - (same at 0) = int_0^t I_{m-1}
/// sum_{j>=m} (j-m) c_j(t)  - (same at 0) = int_0^t sum_{j>=m} I_j
/// sum_{j>=m} (j²-m²) c_j(t) - (same at 0) = int_0^t sum_{j>=m} (2j+1) I_j
/// ```
///
/// with the time integrals taken over the recorded snapshots by the
/// corrected trapezoid rule. The trajectory must be sampled at least every
/// 1/100 of its span.
pub fn tail_identity_residual(
    trajectory: &Trajectory,
    kernel: &Kernel,
    m: usize,
) -> Result<IdentityResidualReport> {
    tail_identity_residual_with(trajectory, kernel, m, Quadrature::default())
}

pub fn tail_identity_residual_with(
    trajectory: &Trajectory,
    kernel: &Kernel,
    m: usize,
    rule: Quadrature,
) -> Result<IdentityResidualReport> {
    let snaps = &trajectory.snapshots;
    let first = trajectory.initial();
    let n = first.n();
    if m > n {
        return Err(EdgError::IndexOutOfRange { index: m, n });
    }
    let span = trajectory.last().t() - first.t();
    let cadence = snaps
        .windows(2)
        .map(|w| w[1].t() - w[0].t())
        .fold(0.0, f64::max);
    if cadence > span / 100.0 * (1.0 + 1e-9) {
        return Err(EdgError::InsufficientSampling(format!(
            "largest snapshot spacing {cadence:e} exceeds span/100 = {:e}",
            span / 100.0
        )));
    }

    let plan = RhsPlan::new(kernel, n)?;
    let mut sums = ExchangeSums::zeros(n);
    let mut dsums = ExchangeSums::zeros(n);
    let mut d = vec![0.0; n + 1];
    // (rates, their time derivatives) per snapshot
    let rates: Vec<([f64; 3], [f64; 3])> = snaps
        .iter()
        .map(|s| {
            let c = s.c();
            plan.eval_into(c, &mut sums, &mut d);
            let f = tail_rates(&flux_from_sums(c, &sums), m);
            if rule == Quadrature::Trapezoid {
                return (f, [0.0; 3]);
            }
            // the sums are linear in c, so dI/dt = I(dc/dt; S, T) + I(c; S', T')
            plan.exchange_sums(&d, &mut dsums);
            let df: Vec<f64> = flux_from_sums(&d, &sums)
                .iter()
                .zip(flux_from_sums(c, &dsums))
                .map(|(a, b)| a + b)
                .collect();
            (f, tail_rates(&df, m))
        })
        .collect();

    let mut residuals = Vec::with_capacity(3);
    for (w, weight) in WEIGHTS.into_iter().enumerate() {
        let base = tail_sum(first.c(), m, weight)?;
        let mut integral = 0.0;
        let mut worst: f64 = 0.0;
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for (i, s) in snaps.iter().enumerate() {
            if i > 0 {
                let h = s.t() - snaps[i - 1].t();
                let (fa, ga) = rates[i - 1];
                let (fb, gb) = rates[i];
                integral += 0.5 * h * (fa[w] + fb[w]) + h * h / 12.0 * (ga[w] - gb[w]);
            }
            lhs = tail_sum(s.c(), m, weight)? - base;
            rhs = integral;
            worst = worst.max((lhs - rhs).abs());
        }
        residuals.push(TailResidual {
            weight,
            residual: worst,
            lhs_final: lhs,
            rhs_final: rhs,
        });
    }
    Ok(IdentityResidualReport {
        m,
        cadence,
        residuals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GelationVerdict {
    NoFiniteTimeGelation,
    FiniteTimeGelationSignature,
    Inconclusive,
}

impl std::fmt::Display for GelationVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NoFiniteTimeGelation => "no-finite-time-gelation",
            Self::FiniteTimeGelationSignature => "finite-time-gelation-signature",
            Self::Inconclusive => "inconclusive",
        })
    }
}

/// Threshold-crossing time at one truncation order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingTime {
    pub n: usize,
    /// First time `M_2 >= threshold * M_2(0)`, the collapse time if that came
    /// first, or the time reached when censored.
    pub t_star: f64,
    /// The threshold was never crossed; `t_star` is a lower bound.
    pub censored: bool,
    /// `t_star` is a step-collapse time.
    pub collapsed: bool,
}

/// Settings of a gelation scan. The verdict thresholds are heuristics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GelationScan {
    pub threshold_ratio: f64,
    pub solver: IntegratorConfig,
    /// Relative increase of `t*` per doubling of `N` above which gelation is
    /// ruled out.
    pub increase_per_doubling: f64,
    /// Relative variation of `t*` per doubling below which a finite gelation
    /// time is indicated.
    pub stable_per_doubling: f64,
}

impl GelationScan {
    pub fn new(threshold_ratio: f64, solver: IntegratorConfig) -> Self {
        Self {
            threshold_ratio,
            solver,
            increase_per_doubling: 0.20,
            stable_per_doubling: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GelationEstimate {
    pub t_star: Vec<CrossingTime>,
    pub verdict: GelationVerdict,
    /// Relative change of `t*` per doubling over the largest pair.
    pub last_change_per_doubling: Option<f64>,
    /// Richardson extrapolation `N -> infinity` of the last three `t*`.
    pub extrapolated: Option<f64>,
}

fn crossing_time(
    kernel: &Kernel,
    spec: &InitialSpec,
    n: usize,
    scan: &GelationScan,
) -> Result<CrossingTime> {
    let initial = init_distribution(spec, n)?;
    let target = scan.threshold_ratio * initial.moment(2.0);
    let mut stepper = Stepper::new(kernel, &initial, &scan.solver)?;
    let mut prev = (initial.t(), initial.moment(2.0));
    let mut crossed = None;
    if prev.1 >= target {
        crossed = Some(prev.0);
    }
    let stop = if crossed.is_some() {
        Advance::Stopped
    } else {
        stepper.advance_to(scan.solver.t_end, |t, c| {
            let m2 = moment_of(c, 2.0);
            if m2 >= target {
                let frac = (target - prev.1) / (m2 - prev.1);
                crossed = Some(prev.0 + frac * (t - prev.0));
                return false;
            }
            prev = (t, m2);
            true
        })?
    };
    Ok(match (crossed, stop) {
        (Some(t_star), _) => CrossingTime {
            n,
            t_star,
            censored: false,
            collapsed: false,
        },
        (None, Advance::Collapsed) => CrossingTime {
            n,
            t_star: stepper.t(),
            censored: false,
            collapsed: true,
        },
        (None, _) => CrossingTime {
            n,
            t_star: stepper.t(),
            censored: true,
            collapsed: false,
        },
    })
}

/// Relative change of `b` over `a` normalized to one doubling of `N`.
fn change_per_doubling(a: &CrossingTime, b: &CrossingTime) -> f64 {
    let doublings = (b.n as f64 / a.n as f64).log2();
    (b.t_star / a.t_star).powf(1.0 / doublings) - 1.0
}

/// `t = T + C N^{-p}` through three points at geometric `N`; requires the
/// differences to shrink.
fn richardson(t: [f64; 3]) -> Option<f64> {
    let (d1, d2) = (t[1] - t[0], t[2] - t[1]);
    if d2 == 0.0 {
        return Some(t[2]);
    }
    let r = d1 / d2;
    (r > 1.0).then(|| t[2] + d2 / (r - 1.0))
}

fn verdict(points: &[CrossingTime], scan: &GelationScan) -> (GelationVerdict, Option<f64>) {
    if points.iter().all(|p| p.censored) {
        return (GelationVerdict::NoFiniteTimeGelation, None);
    }
    let (a, b) = (&points[points.len() - 2], &points[points.len() - 1]);
    if a.censored {
        // a later crossing at the larger order after none at the smaller one
        return (GelationVerdict::Inconclusive, None);
    }
    let change = change_per_doubling(a, b);
    let v = if change > scan.increase_per_doubling {
        GelationVerdict::NoFiniteTimeGelation
    } else if !b.censored && change.abs() < scan.stable_per_doubling {
        GelationVerdict::FiniteTimeGelationSignature
    } else {
        GelationVerdict::Inconclusive
    };
    (v, Some(change))
}

/// Scans truncation orders for the time at which `M_2` first exceeds
/// `threshold_ratio * M_2(0)`.
///
/// `n_list` needs at least three entries, each at least twice the previous.
/// Orders run concurrently; results come back in input order.
pub fn estimate_gelation_time(
    kernel: &Kernel,
    spec: &InitialSpec,
    n_list: &[usize],
    scan: &GelationScan,
) -> Result<GelationEstimate> {
    if n_list.len() < 3 || n_list.windows(2).any(|w| w[1] < 2 * w[0]) || n_list[0] == 0 {
        return Err(EdgError::InvalidParameter(format!(
            "need at least three truncation orders, each at least double the previous: {n_list:?}"
        )));
    }
    if !(scan.threshold_ratio > 1.0) {
        return Err(EdgError::InvalidParameter(format!(
            "threshold ratio must exceed 1, got {}",
            scan.threshold_ratio
        )));
    }
    scan.solver.validate()?;
    let points = n_list
        .par_iter()
        .map(|&n| crossing_time(kernel, spec, n, scan))
        .collect::<Result<Vec<_>>>()?;
    let (verdict, last_change) = verdict(&points, scan);
    let tail = &points[points.len() - 3..];
    let extrapolated = if tail.iter().any(|p| p.censored) {
        None
    } else {
        richardson([tail[0].t_star, tail[1].t_star, tail[2].t_star])
    };
    Ok(GelationEstimate {
        t_star: points,
        verdict,
        last_change_per_doubling: last_change,
        extrapolated,
    })
}

/// Growth of one weighted tail in a blow-up probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailGrowth {
    pub m: usize,
    pub initial: f64,
    pub last: f64,
    /// `last / initial`.
    pub factor: f64,
    /// `d/dt log(tail)` at the initial state.
    pub initial_rate: f64,
}

/// What the monotonicity verdict of a probe was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthBasis {
    /// Growth factors at the last accepted state.
    Factors,
    /// The run collapsed before its first accepted step, so every factor is
    /// exactly 1; the ordering is read from the initial logarithmic rates,
    /// which fix the factors to first order in elapsed time.
    InitialRates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub regime: RegimeLabel,
    pub weight: TailWeight,
    pub outcome: Outcome,
    pub collapse_time: Option<f64>,
    /// Time of the last accepted state.
    pub final_time: f64,
    pub accepted_steps: u64,
    pub growth: Vec<TailGrowth>,
    pub basis: GrowthBasis,
    /// Growth strictly increasing along the sorted `m` list.
    pub increasing_in_m: bool,
}

/// Tail weight matching the growth estimate of each non-existence argument.
pub fn probe_weight(regime: RegimeLabel) -> TailWeight {
    match regime {
        RegimeLabel::NonexistenceRiskBiased => TailWeight::LinearExcess,
        _ => TailWeight::QuadraticExcess,
    }
}

/// Blow-up probe for kernels classified at risk of non-existence.
pub fn blowup_probe(
    kernel: &Kernel,
    spec: &InitialSpec,
    m_list: &[usize],
    t_end: f64,
    n: usize,
) -> Result<BlowupReport> {
    let regime = kernel.classify().label;
    if !regime.is_nonexistence_risk() {
        return Err(EdgError::WrongRegime(format!(
            "blow-up probe needs a non-existence-risk kernel, {} is {regime}",
            kernel.name()
        )));
    }
    let initial = init_distribution(spec, n)?;
    probe_state(kernel, &initial, m_list, &IntegratorConfig::new(t_end), probe_weight(regime))
}

/// The probe without the regime check, for control runs; `weight` selects the
/// tail sum.
pub fn probe_state(
    kernel: &Kernel,
    initial: &ClusterState,
    m_list: &[usize],
    solver: &IntegratorConfig,
    weight: TailWeight,
) -> Result<BlowupReport> {
    let mut ms = m_list.to_vec();
    ms.sort_unstable();
    ms.dedup();
    if ms.is_empty() {
        return Err(EdgError::InvalidParameter("empty m list".into()));
    }
    if let Some(&m) = ms.iter().find(|&&m| m > initial.n()) {
        return Err(EdgError::IndexOutOfRange {
            index: m,
            n: initial.n(),
        });
    }
    let mut cfg = solver.clone();
    // only the end state matters here
    cfg.record_every = if cfg.t_end > 0.0 { cfg.t_end } else { 1.0 };
    let trajectory = integrate(kernel, initial, &cfg)?;
    let last = trajectory.last();

    let plan = RhsPlan::new(kernel, initial.n())?;
    let mut sums = ExchangeSums::zeros(initial.n());
    plan.exchange_sums(initial.c(), &mut sums);
    let flux = flux_from_sums(initial.c(), &sums);
    let w = WEIGHTS.iter().position(|x| *x == weight).unwrap_or(2);

    let mut growth = Vec::with_capacity(ms.len());
    for &m in &ms {
        let a = tail_sum(initial.c(), m, weight)?;
        let b = tail_sum(last.c(), m, weight)?;
        let ratio = |x: f64| {
            if a > 0.0 {
                x / a
            } else if x > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        };
        growth.push(TailGrowth {
            m,
            initial: a,
            last: b,
            factor: ratio(b),
            initial_rate: if a > 0.0 { tail_rates(&flux, m)[w] / a } else { 0.0 },
        });
    }
    let basis = if trajectory.stats.accepted == 0 {
        GrowthBasis::InitialRates
    } else {
        GrowthBasis::Factors
    };
    let key = |g: &TailGrowth| match basis {
        GrowthBasis::Factors => g.factor,
        GrowthBasis::InitialRates => g.initial_rate,
    };
    let increasing_in_m = growth.windows(2).all(|p| key(&p[1]) > key(&p[0]));
    Ok(BlowupReport {
        regime: kernel.classify().label,
        weight,
        outcome: trajectory.outcome,
        collapse_time: trajectory.collapse_time,
        final_time: last.t(),
        accepted_steps: trajectory.stats.accepted,
        growth,
        basis,
        increasing_in_m,
    })
}
