//! Right-hand side of the truncated exchange system, its mass-flow form and
//! the weighted moment-rate identity.
//!
//! With `S_j = sum_{k=0}^{N-1} K(j,k) c_k` (export sum, `1 <= j <= N`) and
//! `T_j = sum_{k=1}^{N} K(k,j) c_k` (import sum, `0 <= j <= N-1`):
//!
//! ```text
//! dc_0/dt = c_1 S_1 - c_0 T_0
//! dc_j/dt = c_{j+1} S_{j+1} - c_j S_j - c_j T_j + c_{j-1} T_{j-1}     1 <= j <= N-1
//! dc_N/dt = -c_N S_N + c_{N-1} T_{N-1}
//! ```
//!
//! and the flux across the `j | j+1` boundary is `I_j = c_j T_j - c_{j+1} S_{j+1}`.

use rayon::prelude::*;

use crate::error::{EdgError, Result};
use crate::kernel::{Kernel, KernelForm};
use crate::state::ClusterState;
use crate::summation::{compensated_dot, compensated_sum, CompensatedSum};

/// Dense kernel tables are cached up to this many entries.
const DENSE_TABLE_LIMIT: usize = 1 << 22;

/// Row count above which the direct path fans out across threads.
const PARALLEL_ROWS: usize = 256;

/// `dc_j/dt` for `j = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivative(Vec<f64>);

impl Derivative {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Mass flow `I_j`, `j = 0..N-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxProfile(Vec<f64>);

impl FluxProfile {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Rebuilds `dc/dt` from flux differences, with `I_{-1} = I_N = 0`.
    pub fn divergence(&self) -> Vec<f64> {
        let n = self.0.len();
        (0..=n)
            .map(|j| {
                let left = if j == 0 { 0.0 } else { self.0[j - 1] };
                let right = if j == n { 0.0 } else { self.0[j] };
                left - right
            })
            .collect()
    }
}

/// Export and import sums of one state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExchangeSums {
    /// `S_j`; index 0 is unused and held at zero.
    pub export: Vec<f64>,
    /// `T_j`; index `N` is unused and held at zero.
    pub import: Vec<f64>,
}

impl ExchangeSums {
    pub fn zeros(n: usize) -> Self {
        Self {
            export: vec![0.0; n + 1],
            import: vec![0.0; n + 1],
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self
            .export
            .iter()
            .chain(self.import.iter())
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(EdgError::InvalidKernel("non-finite exchange rate sum".into()))
        }
    }

    /// `max_j (S_j + T_j)`: the fastest per-unit loss rate, which sets the
    /// stable step of an explicit method.
    pub fn max_loss_rate(&self) -> f64 {
        self.export
            .iter()
            .zip(&self.import)
            .map(|(s, t)| s + t)
            .fold(0.0, f64::max)
    }

    /// `sum_j c_j S_j`: total exchange activity, the natural scale of the
    /// cancellations in every conservation check.
    pub fn activity(&self, c: &[f64]) -> f64 {
        compensated_sum(c.iter().zip(&self.export).map(|(a, b)| a * b))
    }
}

enum Tables {
    /// Per separable term: export factors `a_r(0..=N)` and import factors
    /// `b_r(0..=N)`.
    Separable { export: Vec<Vec<f64>>, import: Vec<Vec<f64>> },
    /// Row-major `K(j,k)` on `[0,N]^2`.
    Dense(Vec<f64>),
    Callback(Kernel),
}

/// A kernel prepared for repeated right-hand side evaluation at a fixed
/// truncation order.
pub struct RhsPlan {
    n: usize,
    tables: Tables,
    classical: bool,
}

impl RhsPlan {
    /// Uses the separable fast path whenever the kernel allows it.
    pub fn new(kernel: &Kernel, n: usize) -> Result<Self> {
        Self::build(kernel, n, kernel.is_separable())
    }

    /// Forces the `O(N^2)` evaluation that sums kernel values directly.
    pub fn direct(kernel: &Kernel, n: usize) -> Result<Self> {
        Self::build(kernel, n, false)
    }

    fn build(kernel: &Kernel, n: usize, separable: bool) -> Result<Self> {
        if n == 0 {
            return Err(EdgError::InvalidParameter("truncation order must be >= 1".into()));
        }
        kernel.validate_order(n)?;
        let classical = kernel.is_classical(n);
        let tables = match (kernel.form(), separable) {
            (KernelForm::SeparableSum(terms), true) => Tables::Separable {
                export: terms
                    .iter()
                    .map(|t| (0..=n).map(|j| t.export_factor().eval(j)).collect())
                    .collect(),
                import: terms
                    .iter()
                    .map(|t| (0..=n).map(|k| t.import_factor().eval(k)).collect())
                    .collect(),
            },
            _ if (n + 1) * (n + 1) <= DENSE_TABLE_LIMIT => {
                let mut table = vec![0.0; (n + 1) * (n + 1)];
                for j in 1..=n {
                    for k in 0..=n {
                        table[j * (n + 1) + k] = kernel.eval(j, k)?;
                    }
                }
                Tables::Dense(table)
            }
            _ => Tables::Callback(kernel.clone()),
        };
        Ok(Self {
            n,
            tables,
            classical,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.tables, Tables::Separable { .. })
    }

    /// `K(j,0) = 0` for every exporter: `c_0` does not feed back.
    pub fn is_classical(&self) -> bool {
        self.classical
    }

    /// Fills `S_j` and `T_j` for concentrations `c` (length `N+1`).
    pub fn exchange_sums(&self, c: &[f64], sums: &mut ExchangeSums) {
        let n = self.n;
        debug_assert_eq!(c.len(), n + 1);
        sums.export.resize(n + 1, 0.0);
        sums.import.resize(n + 1, 0.0);
        match &self.tables {
            Tables::Separable { export, import } => {
                sums.export.iter_mut().for_each(|v| *v = 0.0);
                sums.import.iter_mut().for_each(|v| *v = 0.0);
                for (a, b) in export.iter().zip(import) {
                    // B_r = sum_{k<N} b_r(k) c_k, A_r = sum_{k>=1} a_r(k) c_k
                    let b_contr = compensated_dot(&b[..n], &c[..n]);
                    let a_contr = compensated_dot(&a[1..], &c[1..]);
                    for j in 1..=n {
                        sums.export[j] += a[j] * b_contr;
                    }
                    for j in 0..n {
                        sums.import[j] += a_contr * b[j];
                    }
                }
            }
            Tables::Dense(table) => {
                let row = |j: usize| &table[j * (n + 1)..(j + 1) * (n + 1)];
                let export_row = |j: usize| -> f64 {
                    if j == 0 {
                        return 0.0;
                    }
                    compensated_sum(row(j)[..n].iter().zip(c).map(|(kv, cv)| kv * cv))
                };
                let import_col = |j: usize| -> f64 {
                    if j == n {
                        return 0.0;
                    }
                    compensated_sum((1..=n).map(|k| row(k)[j] * c[k]))
                };
                fill(&mut sums.export, n, export_row);
                fill(&mut sums.import, n, import_col);
            }
            Tables::Callback(kernel) => {
                let export_row = |j: usize| -> f64 {
                    if j == 0 {
                        return 0.0;
                    }
                    compensated_sum((0..n).map(|k| kernel.rate_unchecked(j, k) * c[k]))
                };
                let import_col = |j: usize| -> f64 {
                    if j == n {
                        return 0.0;
                    }
                    compensated_sum((1..=n).map(|k| kernel.rate_unchecked(k, j) * c[k]))
                };
                fill(&mut sums.export, n, export_row);
                fill(&mut sums.import, n, import_col);
            }
        }
    }

    /// Evaluates `dc/dt` into `out`, using `sums` as scratch.
    pub fn eval_into(&self, c: &[f64], sums: &mut ExchangeSums, out: &mut [f64]) {
        self.exchange_sums(c, sums);
        assemble(c, sums, out);
    }
}

fn fill<F>(dst: &mut [f64], n: usize, f: F)
where
    F: Fn(usize) -> f64 + Sync,
{
    if n >= PARALLEL_ROWS {
        dst.par_iter_mut().enumerate().for_each(|(j, v)| *v = f(j));
    } else {
        dst.iter_mut().enumerate().for_each(|(j, v)| *v = f(j));
    }
}

/// Forms the rows of the truncated system from exchange sums.
pub fn assemble(c: &[f64], sums: &ExchangeSums, out: &mut [f64]) {
    let n = c.len() - 1;
    let s = &sums.export;
    let t = &sums.import;
    out[0] = c[1] * s[1] - c[0] * t[0];
    for j in 1..n {
        let gain = c[j + 1] * s[j + 1] + c[j - 1] * t[j - 1];
        let loss = c[j] * s[j] + c[j] * t[j];
        out[j] = gain - loss;
    }
    out[n] = c[n - 1] * t[n - 1] - c[n] * s[n];
}

fn evaluate(plan: &RhsPlan, state: &ClusterState) -> Result<Derivative> {
    let mut sums = ExchangeSums::zeros(plan.n);
    plan.exchange_sums(state.c(), &mut sums);
    sums.check_finite()?;
    let mut d = vec![0.0; plan.n + 1];
    assemble(state.c(), &sums, &mut d);
    Ok(Derivative(d))
}

/// Right-hand side by direct summation of kernel values; `O(N^2)`.
pub fn rhs_direct(kernel: &Kernel, state: &ClusterState) -> Result<Derivative> {
    evaluate(&RhsPlan::direct(kernel, state.n())?, state)
}

/// Right-hand side of a separable kernel in `O(N R)` for `R` terms.
pub fn rhs_separable(kernel: &Kernel, state: &ClusterState) -> Result<Derivative> {
    if !kernel.is_separable() {
        return Err(EdgError::InvalidKernel(format!(
            "{} is not a separable sum",
            kernel.name()
        )));
    }
    evaluate(&RhsPlan::new(kernel, state.n())?, state)
}

/// Exchange sums of a state, choosing the fastest available path.
pub fn exchange_sums(kernel: &Kernel, state: &ClusterState) -> Result<ExchangeSums> {
    let plan = RhsPlan::new(kernel, state.n())?;
    let mut sums = ExchangeSums::zeros(state.n());
    plan.exchange_sums(state.c(), &mut sums);
    sums.check_finite()?;
    Ok(sums)
}

pub(crate) fn flux_from_sums(c: &[f64], sums: &ExchangeSums) -> Vec<f64> {
    let n = c.len() - 1;
    (0..n)
        .map(|j| c[j] * sums.import[j] - c[j + 1] * sums.export[j + 1])
        .collect()
}

/// Mass flow `I_j = c_j T_j - c_{j+1} S_{j+1}` for `j = 0..N-1`.
pub fn flux(kernel: &Kernel, state: &ClusterState) -> Result<FluxProfile> {
    let sums = exchange_sums(kernel, state)?;
    Ok(FluxProfile(flux_from_sums(state.c(), &sums)))
}

/// `sum_j g_j dc_j/dt` through the regrouped form
/// `sum_{j=1}^{N} (g_{j-1}-g_j) c_j S_j + sum_{j=0}^{N-1} (g_{j+1}-g_j) c_j T_j`.
pub fn moment_rate(kernel: &Kernel, state: &ClusterState, g: &[f64]) -> Result<f64> {
    let n = state.n();
    if g.len() != n + 1 {
        return Err(EdgError::InvalidParameter(format!(
            "weight sequence has {} entries, expected {}",
            g.len(),
            n + 1
        )));
    }
    if let Some(v) = g.iter().find(|v| !v.is_finite()) {
        return Err(EdgError::InvalidParameter(format!("weight {v} is not finite")));
    }
    let sums = exchange_sums(kernel, state)?;
    Ok(moment_rate_from_sums(state.c(), &sums, g))
}

pub(crate) fn moment_rate_from_sums(c: &[f64], sums: &ExchangeSums, g: &[f64]) -> f64 {
    let n = c.len() - 1;
    let mut acc = CompensatedSum::new();
    for j in 1..=n {
        acc.add((g[j - 1] - g[j]) * c[j] * sums.export[j]);
    }
    for j in 0..n {
        acc.add((g[j + 1] - g[j]) * c[j] * sums.import[j]);
    }
    acc.value()
}
