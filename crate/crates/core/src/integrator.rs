//! Adaptive time integration of the truncated system.
//!
//! An explicit embedded Runge–Kutta pair of orders 5 and 4 (Dormand–Prince,
//! first-same-as-last) with a max-norm error controller. Every stage is a
//! linear combination of right-hand sides that conserve `M_0` and `M_1`, so
//! accepted steps conserve both up to rounding.
//!
//! Negativity: a candidate with a component below `-negativity_floor` is
//! rejected and the step halved; components in `(-negativity_floor, 0)` are
//! clipped to zero and the removed amount is booked in a [`ClipLedger`]. The
//! default floor is zero, so every negative candidate is rejected and no
//! clipping happens: clipping near the truncation edge costs `j` units of
//! mass per unit of volume and quickly dominates the conservation budget.
//!
//! When the controller asks for a step below `dt_min` the run stops with
//! [`Outcome::StepCollapse`]. That is an outcome, not an error: it is the
//! finite-`N` footprint of blow-up. An absolute floor alone rarely fires at
//! moderate `N`, because the truncated rates are bounded by `N`-dependent
//! constants; the run then grinds on ever smaller steps. So a run also
//! collapses when the fastest loss rate `max_j (S_j + T_j)`, which fixes the
//! stable explicit step, has grown by more than `stiffening_limit` over its
//! initial value: the admissible step has shrunk by that factor.
//!
//! For classical kernels (`K(j,0) = 0`) the `c_0` row is a passive
//! accumulator of the other rows, so it is left out of error and negativity
//! control; the occupied sizes then evolve bitwise independently of `c_0(0)`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EdgError, Result};
use crate::kernel::Kernel;
use crate::rhs::{ExchangeSums, RhsPlan};
use crate::state::{ClusterState, MomentSeries};

// Dormand–Prince 5(4) tableau. The system is autonomous, so the nodes c_i
// never appear.

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*, the embedded error weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Solver settings. Times are absolute; `t_end` is the final time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub t_end: f64,
    pub record_every: f64,
    /// Candidates with a component below `-negativity_floor` are rejected;
    /// smaller excursions are clipped.
    pub negativity_floor: f64,
    /// Collapse once the fastest loss rate exceeds this multiple of its value
    /// at the start of the run. `f64::INFINITY` disables the check.
    pub stiffening_limit: f64,
    /// Hard cap on step attempts.
    pub max_steps: u64,
    /// Moments tracked in the trajectory's [`MomentSeries`].
    pub moment_exponents: Vec<f64>,
}

impl IntegratorConfig {
    /// Defaults for a run to `t_end`: `rtol = 1e-8`, `atol = 1e-12`,
    /// `dt_min = 1e-12 t_end`, `dt_init = 1e-6 t_end`, `dt_max = t_end`,
    /// 100 recorded intervals, and no clipping band.
    pub fn new(t_end: f64) -> Self {
        let scale = if t_end > 0.0 { t_end } else { 1.0 };
        Self {
            rtol: 1e-8,
            atol: 1e-12,
            dt_init: 1e-6 * scale,
            dt_min: 1e-12 * scale,
            dt_max: scale,
            t_end,
            record_every: scale / 100.0,
            negativity_floor: 0.0,
            stiffening_limit: 100.0,
            max_steps: 50_000_000,
            moment_exponents: vec![0.0, 1.0, 2.0],
        }
    }

    pub fn with_record_every(mut self, record_every: f64) -> Self {
        self.record_every = record_every;
        self
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn with_moments(mut self, exponents: &[f64]) -> Self {
        self.moment_exponents = exponents.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EdgError::InvalidParameter(msg));
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.rtol.is_finite() && self.atol.is_finite()) {
            return bad(format!("tolerances must be positive: rtol={}, atol={}", self.rtol, self.atol));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_init && self.dt_init <= self.dt_max)
            || !self.dt_max.is_finite()
        {
            return bad(format!(
                "need 0 < dt_min <= dt_init <= dt_max, got {} / {} / {}",
                self.dt_min, self.dt_init, self.dt_max
            ));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return bad(format!("t_end = {}", self.t_end));
        }
        if !(self.record_every.is_finite() && self.record_every > 0.0) {
            return bad(format!("record_every = {}", self.record_every));
        }
        if !(self.stiffening_limit > 1.0) {
            return bad(format!("stiffening_limit = {}", self.stiffening_limit));
        }
        if !(self.negativity_floor >= 0.0) {
            return bad(format!("negativity_floor = {}", self.negativity_floor));
        }
        if self.moment_exponents.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("moment exponents must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Amount removed by clipping small negative excursions to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipLedger {
    /// `sum |clipped c_j|`
    pub volume: f64,
    /// `sum j |clipped c_j|`
    pub mass: f64,
    pub events: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: u64,
    pub rejected: u64,
    pub negativity_rejections: u64,
    pub rhs_evaluations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    StepCollapse,
    NonFinite,
    /// The `max_steps` budget ran out before `t_end`.
    StepLimit,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Completed => "completed",
            Outcome::StepCollapse => "step-collapse",
            Outcome::NonFinite => "non-finite",
            Outcome::StepLimit => "step-limit",
        })
    }
}

/// Recorded snapshots of one run.
///
/// Snapshots sit on the recording grid. A run that stops early also records
/// its last accepted state, so the final snapshot may fall off the grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<ClusterState>,
    pub moments: MomentSeries,
    pub outcome: Outcome,
    /// Time at which the step size collapsed, if it did.
    pub collapse_time: Option<f64>,
    pub clipped: ClipLedger,
    pub stats: SolverStats,
}

impl Trajectory {
    pub fn initial(&self) -> &ClusterState {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &ClusterState {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t()).collect()
    }

    /// Long-format `t,j,c` table.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,j,c")?;
        for s in &self.snapshots {
            for (j, v) in s.c().iter().enumerate() {
                writeln!(w, "{:e},{j},{v:e}", s.t())?;
            }
        }
        Ok(())
    }
}

/// Result of a single step attempt.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: ClusterState,
    /// Scaled local error estimate (accept when `<= 1`).
    pub error: f64,
    pub accepted: bool,
}

/// What stopped [`Stepper::advance_to`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Reached,
    Collapsed,
    /// The step observer asked to stop.
    Stopped,
    StepLimit,
}

struct Attempt {
    error: f64,
    negative: bool,
    finite: bool,
}

/// Stateful integrator over one trajectory.
pub struct Stepper {
    plan: RhsPlan,
    cfg: IntegratorConfig,
    t: f64,
    y: Vec<f64>,
    h: f64,
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    candidate: Vec<f64>,
    sums: ExchangeSums,
    fsal: bool,
    /// Fastest loss rate of the initial state.
    initial_rate: Option<f64>,
    stiffening: f64,
    control_from: usize,
    attempts: u64,
    clipped: ClipLedger,
    stats: SolverStats,
}

impl Stepper {
    pub fn new(kernel: &Kernel, initial: &ClusterState, cfg: &IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = RhsPlan::new(kernel, initial.n())?;
        Ok(Self::with_plan(plan, initial, cfg))
    }

    pub fn with_plan(plan: RhsPlan, initial: &ClusterState, cfg: &IntegratorConfig) -> Self {
        let len = initial.n() + 1;
        let control_from = usize::from(plan.is_classical());
        Self {
            plan,
            cfg: cfg.clone(),
            t: initial.t(),
            y: initial.c().to_vec(),
            h: cfg.dt_init,
            k: std::array::from_fn(|_| vec![0.0; len]),
            stage: vec![0.0; len],
            candidate: vec![0.0; len],
            sums: ExchangeSums::zeros(len - 1),
            fsal: false,
            initial_rate: None,
            stiffening: 1.0,
            control_from,
            attempts: 0,
            clipped: ClipLedger::default(),
            stats: SolverStats::default(),
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn state(&self) -> ClusterState {
        ClusterState::from_parts_unchecked(self.t, self.y.clone())
    }

    pub fn clipped(&self) -> ClipLedger {
        self.clipped
    }

    pub fn stats(&self) -> SolverStats {
        self.stats
    }

    /// Current fastest loss rate over the initial one; 1 before the first
    /// step and for frozen dynamics.
    pub fn stiffening(&self) -> f64 {
        self.stiffening
    }

    /// Step size the controller will try next.
    pub fn proposed_step(&self) -> f64 {
        self.h
    }

    fn rhs(&mut self, stage: usize, use_stage: bool) {
        let input = if use_stage { &self.stage } else { &self.y };
        self.plan.eval_into(input, &mut self.sums, &mut self.k[stage]);
        self.stats.rhs_evaluations += 1;
    }

    fn ensure_first_stage(&mut self) -> Result<()> {
        if !self.fsal {
            self.rhs(0, false);
            if self.k[0].iter().any(|v| !v.is_finite()) {
                return Err(EdgError::NonFiniteRhs {
                    t: self.t,
                    partial: None,
                });
            }
            self.fsal = true;
            if self.initial_rate.is_none() {
                self.initial_rate = Some(self.sums.max_loss_rate());
            }
        }
        Ok(())
    }

    fn combine(&mut self, h: f64, coeffs: &[f64]) {
        let (y, k, stage) = (&self.y, &self.k, &mut self.stage);
        let n = y.len();
        let mut incr = [0.0; 8];
        for (chunk, base) in stage.chunks_mut(8).zip((0..n).step_by(8)) {
            let m = chunk.len();
            incr[..m].fill(0.0);
            for (r, a) in coeffs.iter().enumerate() {
                for (acc, kv) in incr[..m].iter_mut().zip(&k[r][base..base + m]) {
                    *acc += a * kv;
                }
            }
            for ((out, yv), acc) in chunk.iter_mut().zip(&y[base..base + m]).zip(&incr[..m]) {
                *out = yv + h * acc;
            }
        }
    }

    /// Fills `self.candidate` with the fifth-order solution at `t + h` and
    /// `self.k[6]` with its derivative.
    fn attempt(&mut self, h: f64) -> Attempt {
        self.combine(h, &[A21]);
        self.rhs(1, true);
        self.combine(h, &[A31, A32]);
        self.rhs(2, true);
        self.combine(h, &[A41, A42, A43]);
        self.rhs(3, true);
        self.combine(h, &[A51, A52, A53, A54]);
        self.rhs(4, true);
        self.combine(h, &[A61, A62, A63, A64, A65]);
        self.rhs(5, true);
        self.combine(h, &[B1, 0.0, B3, B4, B5, B6]);
        self.candidate.copy_from_slice(&self.stage);
        self.rhs(6, true);

        let mut error: f64 = 0.0;
        let mut negative = false;
        let mut finite = true;
        for i in 0..self.y.len() {
            let yn = self.candidate[i];
            if !yn.is_finite() || !self.k[6][i].is_finite() {
                finite = false;
                continue;
            }
            if i < self.control_from {
                continue;
            }
            let est = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let scale = self.cfg.atol + self.cfg.rtol * self.y[i].abs().max(yn.abs());
            error = error.max(est.abs() / scale);
            if yn < -self.cfg.negativity_floor {
                negative = true;
            }
        }
        if !finite || error.is_nan() {
            error = f64::INFINITY;
        }
        Attempt {
            error,
            negative,
            finite,
        }
    }

    fn accept(&mut self, h: f64) {
        self.t += h;
        let mut clipped_any = false;
        for (j, v) in self.candidate.iter_mut().enumerate() {
            if *v < 0.0 {
                self.clipped.volume += -*v;
                self.clipped.mass += -*v * j as f64;
                self.clipped.events += 1;
                *v = 0.0;
                clipped_any = true;
            }
        }
        std::mem::swap(&mut self.y, &mut self.candidate);
        // the last stage was evaluated at the accepted state
        if let Some(r0) = self.initial_rate.filter(|r| *r > 0.0) {
            self.stiffening = self.sums.max_loss_rate() / r0;
        }
        if clipped_any {
            self.fsal = false;
        } else {
            self.k.swap(0, 6);
        }
        self.stats.accepted += 1;
    }

    /// Advances to exactly `t_target`. `on_step` sees every accepted state and
    /// may return `false` to stop early.
    pub fn advance_to<F>(&mut self, t_target: f64, mut on_step: F) -> Result<Advance>
    where
        F: FnMut(f64, &[f64]) -> bool,
    {
        while self.t < t_target {
            if self.h < self.cfg.dt_min {
                return Ok(Advance::Collapsed);
            }
            if self.attempts >= self.cfg.max_steps {
                return Ok(Advance::StepLimit);
            }
            self.attempts += 1;
            self.ensure_first_stage()?;

            let remaining = t_target - self.t;
            let landing = self.h >= remaining;
            let h = if landing { remaining } else { self.h };
            let att = self.attempt(h);

            if att.error <= 1.0 && !att.negative && att.finite {
                let factor = if att.error == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * att.error.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                self.accept(h);
                if landing {
                    self.t = t_target;
                }
                self.h = if factor >= 1.0 {
                    self.h.max(h * factor)
                } else {
                    h * factor
                }
                .min(self.cfg.dt_max);
                if self.stiffening() > self.cfg.stiffening_limit {
                    return Ok(Advance::Collapsed);
                }
                if !on_step(self.t, &self.y) {
                    return Ok(Advance::Stopped);
                }
            } else {
                self.stats.rejected += 1;
                let mut factor = if att.error.is_finite() {
                    (SAFETY * att.error.powf(-0.2)).clamp(MIN_FACTOR, 1.0)
                } else {
                    MIN_FACTOR
                };
                if att.negative {
                    self.stats.negativity_rejections += 1;
                    factor = factor.min(0.5);
                }
                self.h = h * factor;
            }
        }
        Ok(Advance::Reached)
    }
}

/// One step attempt of size `dt` from `state`.
///
/// `dt = 0` is the identity. A rejected attempt returns the input state.
pub fn step(
    kernel: &Kernel,
    state: &ClusterState,
    dt: f64,
    config: &IntegratorConfig,
) -> Result<StepResult> {
    if dt == 0.0 {
        return Ok(StepResult {
            state: state.clone(),
            error: 0.0,
            accepted: true,
        });
    }
    config.validate()?;
    if !(dt >= config.dt_min && dt <= config.dt_max) {
        return Err(EdgError::InvalidParameter(format!(
            "dt = {dt} outside [{}, {}]",
            config.dt_min, config.dt_max
        )));
    }
    let mut stepper = Stepper::new(kernel, state, config)?;
    stepper.ensure_first_stage()?;
    let att = stepper.attempt(dt);
    if att.error <= 1.0 && !att.negative && att.finite {
        stepper.accept(dt);
        Ok(StepResult {
            state: stepper.state(),
            error: att.error,
            accepted: true,
        })
    } else {
        Ok(StepResult {
            state: state.clone(),
            error: att.error,
            accepted: false,
        })
    }
}

/// Recording times after `t0`: the cadence grid, then `t_end`.
pub(crate) fn record_times(t0: f64, t_end: f64, every: f64) -> Vec<f64> {
    let mut times = Vec::new();
    let mut i = 1u64;
    loop {
        let t = i as f64 * every;
        if t >= t_end * (1.0 - 1e-12) {
            break;
        }
        if t > t0 {
            times.push(t);
        }
        i += 1;
    }
    if t_end > t0 {
        times.push(t_end);
    }
    times
}

/// Integrates from `initial` to `config.t_end`, recording at the configured
/// cadence.
pub fn integrate(
    kernel: &Kernel,
    initial: &ClusterState,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    let mut stepper = Stepper::new(kernel, initial, config)?;
    let mut snapshots = vec![initial.clone()];
    let mut outcome = Outcome::Completed;
    let mut collapse_time = None;

    let finish = |snapshots: Vec<ClusterState>, outcome, collapse_time, stepper: &Stepper| {
        Trajectory {
            moments: MomentSeries::from_states(&config.moment_exponents, &snapshots),
            snapshots,
            outcome,
            collapse_time,
            clipped: stepper.clipped(),
            stats: stepper.stats(),
        }
    };

    for tr in record_times(initial.t(), config.t_end, config.record_every) {
        match stepper.advance_to(tr, |_, _| true) {
            Ok(Advance::Reached) | Ok(Advance::Stopped) => snapshots.push(stepper.state()),
            Ok(stop @ (Advance::Collapsed | Advance::StepLimit)) => {
                if stepper.t() > snapshots.last().map_or(f64::NEG_INFINITY, |s| s.t()) {
                    snapshots.push(stepper.state());
                }
                if stop == Advance::Collapsed {
                    outcome = Outcome::StepCollapse;
                    collapse_time = Some(stepper.t());
                } else {
                    outcome = Outcome::StepLimit;
                }
                break;
            }
            Err(EdgError::NonFiniteRhs { t, .. }) => {
                let partial = finish(snapshots, Outcome::NonFinite, None, &stepper);
                return Err(EdgError::NonFiniteRhs {
                    t,
                    partial: Some(Box::new(partial)),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(finish(snapshots, outcome, collapse_time, &stepper))
}
