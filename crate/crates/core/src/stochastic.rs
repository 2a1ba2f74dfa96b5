//! Microscopic exchange process on a complete graph.
//!
//! `L` sites carry integer masses. Each ordered pair of distinct sites
//! `(x, y)` with masses `(j, k)`, `j >= 1`, fires at rate `K(j,k) / L`, moving
//! one unit from `x` to `y`. On the complete graph the sites are
//! exchangeable, so the process is tracked through the occupancy histogram
//! `n_j` alone and simulated exactly (Gillespie). Empirical fractions
//! `n_j / L` approach the mean-field concentrations as `L` grows.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EdgError, Result};
use crate::integrator::{record_times, Trajectory};
use crate::kernel::Kernel;

/// Rebuild the rate sums from scratch this often to shed rounding drift.
const REFRESH_EVERY: u64 = 1024;

/// Initial particle configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub masses: Vec<u64>,
    pub seed: u64,
}

impl ParticleConfig {
    pub fn new(masses: Vec<u64>, seed: u64) -> Self {
        Self { masses, seed }
    }

    /// `sites` sites of equal mass.
    pub fn uniform(sites: usize, mass: u64, seed: u64) -> Self {
        Self::new(vec![mass; sites], seed)
    }

    pub fn sites(&self) -> usize {
        self.masses.len()
    }

    pub fn total_mass(&self) -> u64 {
        self.masses.iter().sum()
    }
}

/// Empirical occupancy fractions `n_j / L` on a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTrajectory {
    pub sites: usize,
    pub times: Vec<f64>,
    /// `fractions[s][j]` for `j = 0..=` the largest mass present at `times[s]`
    /// (ensemble means pad to the largest mass of any replica).
    pub fractions: Vec<Vec<f64>>,
    /// Events simulated (summed over replicas for ensemble means).
    pub events: u64,
}

impl EmpiricalTrajectory {
    /// Rows `replica,t,j,c`.
    pub fn write_rows<W: Write>(&self, mut w: W, replica: usize) -> io::Result<()> {
        for (t, row) in self.times.iter().zip(&self.fractions) {
            for (j, v) in row.iter().enumerate() {
                writeln!(w, "{replica},{t:e},{j},{v:e}")?;
            }
        }
        Ok(())
    }
}

/// Replicas in order and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub replicas: Vec<EmpiricalTrajectory>,
    pub mean: EmpiricalTrajectory,
}

impl Ensemble {
    /// Long-format `replica,t,j,c` table of every replica.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "replica,t,j,c")?;
        for (r, tr) in self.replicas.iter().enumerate() {
            tr.write_rows(&mut w, r)?;
        }
        Ok(())
    }
}

/// Occupancy histogram with per-exporter rate sums.
struct Histogram<'k> {
    kernel: &'k Kernel,
    /// `n_j`
    counts: Vec<u64>,
    /// `A_j = sum_k n_k K(j,k)`
    pull: Vec<f64>,
    /// `W_j = n_j (A_j - K(j,j))`: rate of `j`-exports times `L`.
    weight: Vec<f64>,
    total: f64,
}

impl<'k> Histogram<'k> {
    fn new(kernel: &'k Kernel, masses: &[u64]) -> Result<Self> {
        let top = masses.iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0u64; top + 2];
        for &m in masses {
            counts[m as usize] += 1;
        }
        let mut h = Self {
            kernel,
            counts,
            pull: Vec::new(),
            weight: Vec::new(),
            total: 0.0,
        };
        h.refresh()?;
        Ok(h)
    }

    fn rate(&self, j: usize, k: usize) -> Result<f64> {
        self.kernel.eval(j, k)
    }

    fn refresh(&mut self) -> Result<()> {
        let len = self.counts.len();
        self.pull = vec![0.0; len];
        for j in 1..len {
            let mut a = 0.0;
            for (k, &n) in self.counts.iter().enumerate() {
                if n > 0 {
                    a += n as f64 * self.rate(j, k)?;
                }
            }
            self.pull[j] = a;
        }
        self.reweigh()
    }

    fn reweigh(&mut self) -> Result<()> {
        self.weight.resize(self.counts.len(), 0.0);
        let mut total = 0.0;
        for j in 1..self.counts.len() {
            let n = self.counts[j];
            let w = if n == 0 {
                0.0
            } else {
                // clamp rounding residue of the incremental update
                (n as f64 * (self.pull[j] - self.rate(j, j)?)).max(0.0)
            };
            self.weight[j] = w;
            total += w;
        }
        if !total.is_finite() {
            return Err(EdgError::RateOverflow);
        }
        self.total = total;
        Ok(())
    }

    /// Keeps one empty slot above the largest mass so `k + 1` always exists.
    fn ensure_len(&mut self, len: usize) -> Result<()> {
        while self.counts.len() < len {
            let j = self.counts.len();
            self.counts.push(0);
            let mut a = 0.0;
            for (k, &n) in self.counts.iter().enumerate() {
                if n > 0 {
                    a += n as f64 * self.rate(j, k)?;
                }
            }
            self.pull.push(a);
        }
        Ok(())
    }

    fn shift(&mut self, mass: usize, delta: i64) -> Result<()> {
        if delta > 0 {
            self.counts[mass] += delta as u64;
        } else {
            self.counts[mass] -= (-delta) as u64;
        }
        let d = delta as f64;
        for j in 1..self.pull.len() {
            self.pull[j] += d * self.rate(j, mass)?;
        }
        Ok(())
    }

    /// Index `i` with `u` falling in the `i`-th cell of the cumulative sums
    /// of `w`; the last positive cell absorbs rounding overshoot.
    fn pick(w: impl Iterator<Item = (usize, f64)>, mut u: f64) -> Option<usize> {
        let mut last = None;
        for (i, wi) in w {
            if wi <= 0.0 {
                continue;
            }
            last = Some(i);
            if u < wi {
                return Some(i);
            }
            u -= wi;
        }
        last
    }

    /// Performs one exchange; returns `false` if no exchange is possible.
    fn fire(&mut self, rng: &mut ChaCha8Rng) -> Result<bool> {
        let exporter = Self::pick(
            self.weight.iter().copied().enumerate(),
            rng.random::<f64>() * self.total,
        );
        let Some(j) = exporter else { return Ok(false) };
        let mut partners = Vec::with_capacity(self.counts.len());
        let mut sum = 0.0;
        for (k, &n) in self.counts.iter().enumerate() {
            let avail = if k == j { n.saturating_sub(1) } else { n };
            let w = if avail == 0 { 0.0 } else { avail as f64 * self.rate(j, k)? };
            partners.push(w);
            sum += w;
        }
        let Some(k) = Self::pick(partners.into_iter().enumerate(), rng.random::<f64>() * sum)
        else {
            return Ok(false);
        };
        self.ensure_len(k + 3)?;
        self.shift(j, -1)?;
        self.shift(j - 1, 1)?;
        self.shift(k, -1)?;
        self.shift(k + 1, 1)?;
        Ok(true)
    }

    fn fractions(&self, sites: usize) -> Vec<f64> {
        let top = self.counts.iter().rposition(|&n| n > 0).unwrap_or(0);
        self.counts[..=top]
            .iter()
            .map(|&n| n as f64 / sites as f64)
            .collect()
    }
}

/// Exact simulation of one replica to `t_end`, recording the empirical
/// fractions at `0`, every `snapshot_every`, and `t_end`.
pub fn simulate_exchange(
    kernel: &Kernel,
    initial: &ParticleConfig,
    t_end: f64,
    snapshot_every: f64,
) -> Result<EmpiricalTrajectory> {
    let sites = initial.sites();
    if sites < 2 {
        return Err(EdgError::InvalidParameter(format!(
            "need at least two sites, got {sites}"
        )));
    }
    if !(t_end.is_finite() && t_end >= 0.0 && snapshot_every.is_finite() && snapshot_every > 0.0) {
        return Err(EdgError::InvalidParameter(format!(
            "t_end = {t_end}, snapshot_every = {snapshot_every}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(initial.seed);
    let mut hist = Histogram::new(kernel, &initial.masses)?;
    let scale = 1.0 / sites as f64;

    let mut times = vec![0.0];
    let mut fractions = vec![hist.fractions(sites)];
    let mut t = 0.0;
    let mut events = 0u64;
    let mut frozen = false;
    for target in record_times(0.0, t_end, snapshot_every) {
        while !frozen {
            let rate = hist.total * scale;
            if rate <= 0.0 {
                frozen = true;
                break;
            }
            // inverse transform on (0, 1]
            let u = 1.0 - rng.random::<f64>();
            let next = t - u.ln() / rate;
            if next > target {
                // memoryless: restart the clock at the snapshot
                t = target;
                break;
            }
            t = next;
            if !hist.fire(&mut rng)? {
                frozen = true;
                break;
            }
            events += 1;
            if events % REFRESH_EVERY == 0 {
                hist.refresh()?;
            } else {
                hist.reweigh()?;
            }
        }
        times.push(target);
        fractions.push(hist.fractions(sites));
    }
    Ok(EmpiricalTrajectory {
        sites,
        times,
        fractions,
        events,
    })
}

fn mean(replicas: &[EmpiricalTrajectory]) -> EmpiricalTrajectory {
    let first = &replicas[0];
    let count = replicas.len() as f64;
    let fractions = (0..first.times.len())
        .map(|s| {
            let width = replicas.iter().map(|r| r.fractions[s].len()).max().unwrap_or(0);
            let mut acc = vec![0.0; width];
            for r in replicas {
                for (a, v) in acc.iter_mut().zip(&r.fractions[s]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
            acc
        })
        .collect();
    EmpiricalTrajectory {
        sites: first.sites,
        times: first.times.clone(),
        fractions,
        events: replicas.iter().map(|r| r.events).sum(),
    }
}

/// Runs `replicas` independent copies seeded `seed + r` in parallel and
/// averages them in replica order.
pub fn simulate_ensemble(
    kernel: &Kernel,
    initial: &ParticleConfig,
    t_end: f64,
    snapshot_every: f64,
    replicas: usize,
) -> Result<Ensemble> {
    if replicas == 0 {
        return Err(EdgError::InvalidParameter("need at least one replica".into()));
    }
    let runs = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let cfg = ParticleConfig::new(initial.masses.clone(), initial.seed.wrapping_add(r as u64));
            simulate_exchange(kernel, &cfg, t_end, snapshot_every)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean(&runs);
    Ok(Ensemble {
        replicas: runs,
        mean,
    })
}

/// Distance between empirical and mean-field distributions at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldDistance {
    pub t: f64,
    /// `1/2 sum_j |c_hat_j - c_j|`
    pub total_variation: f64,
    /// `max_j |c_hat_j - c_j|`
    pub sup: f64,
}

/// Compares snapshot by snapshot; the grids must agree and the ODE must be
/// wide enough to hold every observed mass.
pub fn compare_to_meanfield(
    mc: &EmpiricalTrajectory,
    ode: &Trajectory,
) -> Result<Vec<MeanFieldDistance>> {
    if mc.times.len() != ode.snapshots.len() {
        return Err(EdgError::GridMismatch(format!(
            "{} empirical snapshots vs {} ODE snapshots",
            mc.times.len(),
            ode.snapshots.len()
        )));
    }
    let mut out = Vec::with_capacity(mc.times.len());
    for ((t, emp), s) in mc.times.iter().zip(&mc.fractions).zip(&ode.snapshots) {
        if (t - s.t()).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(EdgError::GridMismatch(format!(
                "snapshot at t = {t} vs ODE t = {}",
                s.t()
            )));
        }
        if emp.len() > s.c().len() {
            return Err(EdgError::GridMismatch(format!(
                "mass {} observed but the ODE is truncated at N = {}",
                emp.len() - 1,
                s.n()
            )));
        }
        let mut tv = 0.0;
        let mut sup: f64 = 0.0;
        for (j, c) in s.c().iter().enumerate() {
            let d = (emp.get(j).copied().unwrap_or(0.0) - c).abs();
            tv += d;
            sup = sup.max(d);
        }
        out.push(MeanFieldDistance {
            t: *t,
            total_variation: 0.5 * tv,
            sup,
        });
    }
    Ok(out)
}
