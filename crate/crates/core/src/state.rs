//! Truncated cluster-size distributions, initial conditions, moments and
//! tail sums.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EdgError, Result};
use crate::summation::compensated_sum;

/// Volume fractions `c_0..=c_N` at time `t`. `c_0` is the empty volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    t: f64,
    c: Vec<f64>,
}

impl ClusterState {
    /// Builds a state, checking `N >= 1` and that every entry is finite and
    /// non-negative.
    pub fn new(t: f64, c: Vec<f64>) -> Result<Self> {
        if c.len() < 2 {
            return Err(EdgError::InvalidParameter(
                "a cluster state needs truncation order N >= 1".into(),
            ));
        }
        if !t.is_finite() {
            return Err(EdgError::InvalidParameter(format!("time {t} is not finite")));
        }
        if let Some((j, v)) = c.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(EdgError::InvalidParameter(format!(
                "c[{j}] = {v} is not a finite non-negative volume fraction"
            )));
        }
        Ok(Self { t, c })
    }

    /// All mass in `c_0`: nothing can move.
    pub fn empty(n: usize, c0: f64) -> Result<Self> {
        let mut c = vec![0.0; n + 1];
        c[0] = c0;
        Self::new(0.0, c)
    }

    pub(crate) fn from_parts_unchecked(t: f64, c: Vec<f64>) -> Self {
        debug_assert!(c.len() >= 2);
        Self { t, c }
    }

    /// Truncation order `N`.
    pub fn n(&self) -> usize {
        self.c.len() - 1
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn into_values(self) -> Vec<f64> {
        self.c
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    /// `M_p = sum_j j^p c_j`, with `0^0 = 1` so that `M_0` counts the empty
    /// volume.
    pub fn moment(&self, p: f64) -> f64 {
        moment_of(&self.c, p)
    }

    /// Tail sum over `j = m..=N` with the requested weight.
    pub fn tail_weighted_sum(&self, m: usize, weight: TailWeight) -> Result<f64> {
        tail_sum(&self.c, m, weight)
    }

    /// Writes the `j,c` snapshot table.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "j,c")?;
        for (j, v) in self.c.iter().enumerate() {
            writeln!(w, "{j},{v:e}")?;
        }
        Ok(())
    }
}

pub(crate) fn moment_of(c: &[f64], p: f64) -> f64 {
    let head = if p == 0.0 { c[0] } else { 0.0 };
    let body = c.iter().enumerate().skip(1).map(|(j, &v)| {
        let jf = j as f64;
        let w = if p == 0.0 {
            1.0
        } else if p == 1.0 {
            jf
        } else if p == 2.0 {
            jf * jf
        } else {
            (p * jf.ln()).exp()
        };
        w * v
    });
    compensated_sum(std::iter::once(head).chain(body))
}

pub(crate) fn tail_sum(c: &[f64], m: usize, weight: TailWeight) -> Result<f64> {
    let n = c.len() - 1;
    if m > n {
        return Err(EdgError::IndexOutOfRange { index: m, n });
    }
    let mf = m as f64;
    Ok(compensated_sum(c.iter().enumerate().skip(m).map(|(j, &v)| {
        let jf = j as f64;
        let w = match weight {
            TailWeight::Count => 1.0,
            TailWeight::LinearExcess => jf - mf,
            TailWeight::QuadraticExcess => jf * jf - mf * mf,
        };
        w * v
    })))
}

/// Weight applied inside a tail sum `sum_{j >= m} w_j c_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailWeight {
    /// `w_j = 1`
    Count,
    /// `w_j = j - m`
    LinearExcess,
    /// `w_j = j^2 - m^2`
    QuadraticExcess,
}

/// How the occupied part of an initial distribution is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Amplitude {
    /// `c_j = A * shape(j)`
    Scale(f64),
    /// `A` chosen so that `sum_{j>=1} c_j` equals this fraction.
    OccupiedFraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialShape {
    /// `c_1 = rho`, every other occupied size empty.
    Monodisperse { rho: f64 },
    /// `c_j = A kappa^j`
    Geometric { kappa: f64, amplitude: Amplitude },
    /// `c_j = A j^(-q)`
    Algebraic { q: f64, amplitude: Amplitude },
    /// `c_1, c_2, ...` given directly; sizes beyond the list are empty.
    Explicit(Vec<f64>),
}

/// What to put in the empty-volume slot `c_0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EmptyVolume {
    /// `c_0 = M_0 - sum_{j>=1} c_j`
    Remainder { m0: f64 },
    /// `c_0` fixed independently of the occupied part (classical studies,
    /// where `c_0` does not feed back).
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialSpec {
    pub shape: InitialShape,
    pub empty: EmptyVolume,
}

impl InitialSpec {
    pub fn monodisperse(rho: f64) -> Self {
        Self {
            shape: InitialShape::Monodisperse { rho },
            empty: EmptyVolume::Remainder { m0: 1.0 },
        }
    }

    pub fn geometric(kappa: f64, amplitude: Amplitude) -> Self {
        Self {
            shape: InitialShape::Geometric { kappa, amplitude },
            empty: EmptyVolume::Remainder { m0: 1.0 },
        }
    }

    pub fn algebraic(q: f64, amplitude: Amplitude) -> Self {
        Self {
            shape: InitialShape::Algebraic { q, amplitude },
            empty: EmptyVolume::Remainder { m0: 1.0 },
        }
    }

    pub fn explicit(values: Vec<f64>) -> Self {
        Self {
            shape: InitialShape::Explicit(values),
            empty: EmptyVolume::Remainder { m0: 1.0 },
        }
    }

    pub fn with_empty(mut self, empty: EmptyVolume) -> Self {
        self.empty = empty;
        self
    }
}

fn amplitude_for(amplitude: Amplitude, shape_sum: f64) -> Result<f64> {
    match amplitude {
        Amplitude::Scale(a) if a.is_finite() && a >= 0.0 => Ok(a),
        Amplitude::OccupiedFraction(f) if f.is_finite() && f >= 0.0 => {
            if shape_sum > 0.0 {
                Ok(f / shape_sum)
            } else {
                Ok(0.0)
            }
        }
        other => Err(EdgError::InvalidParameter(format!("bad amplitude {other:?}"))),
    }
}

/// Builds the state at `t = 0` for truncation order `n`.
pub fn init_distribution(spec: &InitialSpec, n: usize) -> Result<ClusterState> {
    if n == 0 {
        return Err(EdgError::InvalidParameter("truncation order must be >= 1".into()));
    }
    let mut c = vec![0.0; n + 1];
    match &spec.shape {
        InitialShape::Monodisperse { rho } => {
            if !(rho.is_finite() && *rho >= 0.0) {
                return Err(EdgError::InvalidParameter(format!("rho = {rho}")));
            }
            c[1] = *rho;
        }
        InitialShape::Geometric { kappa, amplitude } => {
            if !(*kappa > 0.0 && *kappa < 1.0) {
                return Err(EdgError::InvalidParameter(format!(
                    "geometric ratio kappa must lie in (0,1), got {kappa}"
                )));
            }
            let mut pow = 1.0;
            for v in c.iter_mut().skip(1) {
                pow *= kappa;
                *v = pow;
            }
            let a = amplitude_for(*amplitude, compensated_sum(c[1..].iter().copied()))?;
            c[1..].iter_mut().for_each(|v| *v *= a);
        }
        InitialShape::Algebraic { q, amplitude } => {
            if !(q.is_finite() && *q > 2.0) {
                return Err(EdgError::InvalidParameter(format!(
                    "algebraic exponent q must exceed 2 for a finite first moment, got {q}"
                )));
            }
            for (j, v) in c.iter_mut().enumerate().skip(1) {
                *v = (j as f64).powf(-q);
            }
            let a = amplitude_for(*amplitude, compensated_sum(c[1..].iter().copied()))?;
            c[1..].iter_mut().for_each(|v| *v *= a);
        }
        InitialShape::Explicit(values) => {
            if values.len() > n {
                return Err(EdgError::IndexOutOfRange {
                    index: values.len(),
                    n,
                });
            }
            for (slot, v) in c[1..].iter_mut().zip(values) {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(EdgError::InvalidParameter(format!("explicit value {v}")));
                }
                *slot = *v;
            }
        }
    }
    let occupied = compensated_sum(c[1..].iter().copied());
    c[0] = match spec.empty {
        EmptyVolume::Remainder { m0 } => {
            if !(m0.is_finite() && m0 > 0.0) {
                return Err(EdgError::InvalidParameter(format!("M0 = {m0}")));
            }
            if occupied > m0 * (1.0 + 4.0 * f64::EPSILON) {
                return Err(EdgError::NormalizationExceeded { tail: occupied, m0 });
            }
            (m0 - occupied).max(0.0)
        }
        EmptyVolume::Fixed(c0) => {
            if !(c0.is_finite() && c0 >= 0.0) {
                return Err(EdgError::InvalidParameter(format!("c0 = {c0}")));
            }
            c0
        }
    };
    ClusterState::new(0.0, c)
}

/// Drift of the conserved moments over a series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftLedger {
    /// `max_t |M_0(t) - M_0(0)|`
    pub m0_abs: f64,
    /// `max_t |M_1(t) - M_1(0)|`
    pub m1_abs: f64,
}

/// Time series of selected moments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentSeries {
    pub exponents: Vec<f64>,
    pub times: Vec<f64>,
    /// `values[i][s]` is `M_{exponents[i]}` at `times[s]`.
    pub values: Vec<Vec<f64>>,
    pub drift: DriftLedger,
}

impl MomentSeries {
    pub fn from_states<'a, I>(exponents: &[f64], states: I) -> Self
    where
        I: IntoIterator<Item = &'a ClusterState>,
    {
        let mut series = MomentSeries {
            exponents: exponents.to_vec(),
            values: vec![Vec::new(); exponents.len()],
            ..Default::default()
        };
        let mut first: Option<(f64, f64)> = None;
        for s in states {
            series.push(s.t(), s.c(), &mut first);
        }
        series
    }

    fn push(&mut self, t: f64, c: &[f64], first: &mut Option<(f64, f64)>) {
        self.times.push(t);
        for (p, vals) in self.exponents.iter().zip(self.values.iter_mut()) {
            vals.push(moment_of(c, *p));
        }
        let m0 = moment_of(c, 0.0);
        let m1 = moment_of(c, 1.0);
        let (a0, a1) = *first.get_or_insert((m0, m1));
        self.drift.m0_abs = self.drift.m0_abs.max((m0 - a0).abs());
        self.drift.m1_abs = self.drift.m1_abs.max((m1 - a1).abs());
    }

    /// Values of `M_p` if `p` was requested.
    pub fn series(&self, p: f64) -> Option<&[f64]> {
        self.exponents
            .iter()
            .position(|&e| e == p)
            .map(|i| self.values[i].as_slice())
    }

    /// Writes `t,M0,M1,...` with one column per requested exponent.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for p in &self.exponents {
            write!(w, ",M{p}")?;
        }
        writeln!(w)?;
        for (s, t) in self.times.iter().enumerate() {
            write!(w, "{t:e}")?;
            for vals in &self.values {
                write!(w, ",{:e}", vals[s])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
