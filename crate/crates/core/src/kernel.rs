//! Interaction kernels `K(j, k)`: the rate at which a size-`j` cluster exports
//! one unit of mass to a size-`k` cluster.
//!
//! Kernels carry declared structure (exponents, symmetry, bias) next to their
//! evaluation rule. Regime classification reads only the declaration, never
//! sampled values: growth hypotheses are asymptotic statements and cannot be
//! certified from a finite table.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EdgError, Result};

/// Default probe bound for symmetry checks.
pub const DEFAULT_PROBE_BOUND: usize = 64;

/// Largest kernel magnitude accepted when validating a truncation order.
const MAX_RATE_MAGNITUDE: f64 = 1e250;

/// Relative tolerance used when comparing `K(j,k)` against `K(k,j)`.
const SYMMETRY_RTOL: f64 = 1e-13;

/// One factor of a separable term, as a function of cluster size.
///
/// For `x >= 1` the value is `x^exponent * growth^x`; at `x = 0` it is
/// `at_zero`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub exponent: f64,
    pub growth: f64,
    pub at_zero: f64,
}

impl Factor {
    /// `x^p`, with the conventional `0^p` at zero (1 for `p = 0`, else 0).
    pub fn power(exponent: f64) -> Self {
        let at_zero = if exponent == 0.0 { 1.0 } else { 0.0 };
        Self {
            exponent,
            growth: 1.0,
            at_zero,
        }
    }

    pub fn power_geometric(exponent: f64, growth: f64) -> Self {
        Self {
            exponent,
            growth,
            at_zero: 0.0,
        }
    }

    pub fn with_zero(mut self, at_zero: f64) -> Self {
        self.at_zero = at_zero;
        self
    }

    #[inline]
    pub fn eval(&self, x: usize) -> f64 {
        if x == 0 {
            return self.at_zero;
        }
        let xf = x as f64;
        let base = if self.exponent == 0.0 {
            1.0
        } else if self.exponent == 1.0 {
            xf
        } else {
            xf.powf(self.exponent)
        };
        if self.growth == 1.0 {
            base
        } else {
            base * self.growth.powf(xf)
        }
    }
}

/// `a(j) * b(k)`; the export factor always vanishes at zero so that empty
/// volume never exports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparableTerm {
    export: Factor,
    import: Factor,
}

impl SeparableTerm {
    pub fn new(export: Factor, import: Factor) -> Self {
        Self {
            export: export.with_zero(0.0),
            import,
        }
    }

    pub fn export_factor(&self) -> &Factor {
        &self.export
    }

    pub fn import_factor(&self) -> &Factor {
        &self.import
    }

    #[inline]
    pub fn eval(&self, j: usize, k: usize) -> f64 {
        self.export.eval(j) * self.import.eval(k)
    }
}

/// Rate callback for general kernels.
pub type RateFn = Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelForm {
    SeparableSum(Vec<SeparableTerm>),
    Callback(RateFn),
}

impl fmt::Debug for KernelForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelForm::SeparableSum(terms) => f.debug_tuple("SeparableSum").field(terms).finish(),
            KernelForm::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

/// Structural claims attached to a kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Declared {
    /// Nothing is claimed.
    Nothing,
    /// Exact power form: `j^mu k^nu` (or its symmetrization when the kernel is
    /// symmetric).
    Power { mu: f64, nu: f64 },
    /// Symmetric kernel bounded below by `C j^mu k^nu` for large sizes.
    LowerBound { mu: f64, nu: f64 },
    /// `K(k,j) >= (1+epsilon) K(j,k)` for `j > k >= 1`, `K(j,k) >= C j^beta`.
    Biased { beta: f64, epsilon: f64 },
    /// Factors `a, b` both grow like `o(j)`.
    Sublinear,
}

/// Existence regime read off a kernel's declaration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeLabel {
    GlobalNonsymmetric,
    GlobalSymmetric,
    LocalExistenceOnly,
    ConjecturedGelation,
    NonexistenceRiskSymmetric,
    NonexistenceRiskBiased,
    SublinearFactor,
    Unclassified,
}

impl RegimeLabel {
    pub fn is_nonexistence_risk(self) -> bool {
        matches!(
            self,
            RegimeLabel::NonexistenceRiskBiased | RegimeLabel::NonexistenceRiskSymmetric
        )
    }
}

impl fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegimeLabel::GlobalNonsymmetric => "global-nonsymmetric",
            RegimeLabel::GlobalSymmetric => "global-symmetric",
            RegimeLabel::LocalExistenceOnly => "local-existence-only",
            RegimeLabel::ConjecturedGelation => "conjectured-gelation",
            RegimeLabel::NonexistenceRiskSymmetric => "nonexistence-risk-symmetric",
            RegimeLabel::NonexistenceRiskBiased => "nonexistence-risk-biased",
            RegimeLabel::SublinearFactor => "sublinear-factor",
            RegimeLabel::Unclassified => "unclassified",
        };
        f.write_str(s)
    }
}

/// Classification result. `gelation_conjectured` flags the intermediate
/// symmetric regime, where only local existence is known and finite-time
/// gelation is expected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub label: RegimeLabel,
    pub gelation_conjectured: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub is_nearly_symmetric: bool,
    pub witness: Option<(usize, usize)>,
}

/// An interaction kernel. Immutable after construction and safe to share
/// between threads.
#[derive(Clone, Debug)]
pub struct Kernel {
    name: String,
    form: KernelForm,
    symmetric: bool,
    declared: Declared,
}

fn check_exponent(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value < 0.0 {
        return Err(EdgError::InvalidParameter(format!(
            "{name} must be finite and non-negative, got {value}"
        )));
    }
    Ok(())
}

fn import_power(exponent: f64, classical: bool) -> Factor {
    let f = Factor::power(exponent);
    if classical {
        f.with_zero(0.0)
    } else {
        f
    }
}

impl Kernel {
    /// Separable kernel `sum_r a_r(j) b_r(k)`.
    pub fn separable(
        name: impl Into<String>,
        terms: Vec<SeparableTerm>,
        symmetric: bool,
        declared: Declared,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(EdgError::InvalidKernel("separable kernel without terms".into()));
        }
        for t in &terms {
            for f in [t.export, t.import] {
                if !(f.exponent.is_finite() && f.growth.is_finite() && f.growth > 0.0)
                    || !(f.at_zero.is_finite() && f.at_zero >= 0.0)
                {
                    return Err(EdgError::InvalidKernel(format!("bad factor {f:?}")));
                }
            }
        }
        let kernel = Self {
            name: name.into(),
            form: KernelForm::SeparableSum(terms),
            symmetric,
            declared,
        };
        kernel.verify_declared_symmetry()?;
        Ok(kernel)
    }

    /// General kernel from a rate callback. `K(0, k)` is forced to zero
    /// regardless of what the callback returns.
    pub fn from_fn<F>(
        name: impl Into<String>,
        rate: F,
        symmetric: bool,
        declared: Declared,
    ) -> Result<Self>
    where
        F: Fn(usize, usize) -> f64 + Send + Sync + 'static,
    {
        let kernel = Self {
            name: name.into(),
            form: KernelForm::Callback(Arc::new(rate)),
            symmetric,
            declared,
        };
        kernel.verify_declared_symmetry()?;
        Ok(kernel)
    }

    /// `K = 1` for every exporter `j >= 1`. Outside classical mode the empty
    /// volume also receives at unit rate.
    pub fn constant(classical: bool) -> Self {
        let term = SeparableTerm::new(Factor::power(0.0), import_power(0.0, classical));
        Self {
            name: "constant".into(),
            form: KernelForm::SeparableSum(vec![term]),
            symmetric: true,
            declared: Declared::Power { mu: 0.0, nu: 0.0 },
        }
    }

    /// `K = (j k)^mu`.
    pub fn product(mu: f64, classical: bool) -> Result<Self> {
        check_exponent("mu", mu)?;
        let term = SeparableTerm::new(Factor::power(mu), import_power(mu, classical));
        Ok(Self {
            name: format!("product(mu={mu})"),
            form: KernelForm::SeparableSum(vec![term]),
            symmetric: true,
            declared: Declared::Power { mu, nu: mu },
        })
    }

    /// `K = j^mu k^nu`; symmetric only when `mu == nu`.
    pub fn power(mu: f64, nu: f64, classical: bool) -> Result<Self> {
        check_exponent("mu", mu)?;
        check_exponent("nu", nu)?;
        let term = SeparableTerm::new(Factor::power(mu), import_power(nu, classical));
        Ok(Self {
            name: format!("power(mu={mu},nu={nu})"),
            form: KernelForm::SeparableSum(vec![term]),
            symmetric: mu == nu,
            declared: Declared::Power { mu, nu },
        })
    }

    /// `K = j^mu k^nu + j^nu k^mu`.
    pub fn symmetric_sum(mu: f64, nu: f64, classical: bool) -> Result<Self> {
        check_exponent("mu", mu)?;
        check_exponent("nu", nu)?;
        let terms = vec![
            SeparableTerm::new(Factor::power(mu), import_power(nu, classical)),
            SeparableTerm::new(Factor::power(nu), import_power(mu, classical)),
        ];
        Ok(Self {
            name: format!("sum(mu={mu},nu={nu})"),
            form: KernelForm::SeparableSum(terms),
            symmetric: true,
            declared: Declared::Power { mu, nu },
        })
    }

    /// Growth-favouring kernel `K(j,k) = j^beta k^beta (1+epsilon)^k`, with
    /// `K(j,0) = K(0,k) = 0`. The exchange ratio is exactly
    /// `K(k,j) / K(j,k) = (1+epsilon)^(j-k)`.
    pub fn biased(beta: f64, epsilon: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 1.0) {
            return Err(EdgError::InvalidParameter(format!("beta must exceed 1, got {beta}")));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(EdgError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let term = SeparableTerm::new(
            Factor::power(beta),
            Factor::power_geometric(beta, 1.0 + epsilon),
        );
        Ok(Self {
            name: format!("biased(beta={beta},epsilon={epsilon})"),
            form: KernelForm::SeparableSum(vec![term]),
            symmetric: false,
            declared: Declared::Biased { beta, epsilon },
        })
    }

    /// Named kernels available from configuration files.
    pub fn builtin(name: &str, classical: bool) -> Result<Self> {
        match name {
            "sqrt-product" => Self::separable(
                name,
                vec![SeparableTerm::new(
                    Factor::power(0.5),
                    import_power(0.5, classical),
                )],
                true,
                Declared::Sublinear,
            ),
            "log-product" => {
                let zero = if classical { 0.0 } else { std::f64::consts::LN_2 };
                Self::from_fn(
                    name,
                    move |j, k| {
                        let b = if k == 0 { zero } else { (1.0 + k as f64).ln() };
                        (1.0 + j as f64).ln() * b
                    },
                    true,
                    Declared::Sublinear,
                )
            }
            "zero" => Self::from_fn(name, |_, _| 0.0, true, Declared::Nothing),
            other => Err(EdgError::InvalidKernel(format!("unknown builtin kernel '{other}'"))),
        }
    }

    /// Replaces the declared structure.
    pub fn with_declared(mut self, declared: Declared) -> Self {
        self.declared = declared;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    pub fn terms(&self) -> Option<&[SeparableTerm]> {
        match &self.form {
            KernelForm::SeparableSum(terms) => Some(terms),
            KernelForm::Callback(_) => None,
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.form, KernelForm::SeparableSum(_))
    }

    pub fn symmetric_declared(&self) -> bool {
        self.symmetric
    }

    pub fn declared(&self) -> Declared {
        self.declared
    }

    /// Evaluates `K(j,k)` without validation.
    #[inline]
    pub fn rate_unchecked(&self, j: usize, k: usize) -> f64 {
        if j == 0 {
            return 0.0;
        }
        match &self.form {
            KernelForm::SeparableSum(terms) => terms.iter().map(|t| t.eval(j, k)).sum(),
            KernelForm::Callback(f) => f(j, k),
        }
    }

    /// Evaluates `K(j,k)`, rejecting negative or non-finite rates.
    pub fn eval(&self, j: usize, k: usize) -> Result<f64> {
        let v = self.rate_unchecked(j, k);
        if v.is_finite() && v >= 0.0 {
            Ok(v)
        } else {
            Err(EdgError::InvalidKernel(format!(
                "{}: K({j},{k}) = {v} is not a finite non-negative rate",
                self.name
            )))
        }
    }

    /// True when `K(j,0) = 0` for every exporter `1 <= j <= n`, i.e. the
    /// empty volume never receives mass and `c_0` decouples.
    pub fn is_classical(&self, n: usize) -> bool {
        match &self.form {
            KernelForm::SeparableSum(terms) => terms.iter().all(|t| t.import.at_zero == 0.0),
            KernelForm::Callback(_) => (1..=n).all(|j| self.rate_unchecked(j, 0) == 0.0),
        }
    }

    /// Checks that every rate on `[0, n]^2` is finite, non-negative and below
    /// a magnitude that keeps products with concentrations representable.
    pub fn validate_order(&self, n: usize) -> Result<()> {
        // Separable factors are monotone in size for non-negative exponents
        // and growth >= 1, so checking the corner suffices there.
        if let KernelForm::SeparableSum(terms) = &self.form {
            let monotone = terms
                .iter()
                .all(|t| [t.export, t.import].iter().all(|f| f.exponent >= 0.0 && f.growth >= 1.0));
            if monotone {
                let corner = self.eval(n, n)?;
                if corner > MAX_RATE_MAGNITUDE {
                    return Err(EdgError::InvalidParameter(format!(
                        "{}: K({n},{n}) = {corner:e} overflows at truncation order {n}",
                        self.name
                    )));
                }
                for j in 1..=n {
                    self.eval(j, 0)?;
                }
                return Ok(());
            }
        }
        for j in 1..=n {
            for k in 0..=n {
                let v = self.eval(j, k)?;
                if v > MAX_RATE_MAGNITUDE {
                    return Err(EdgError::InvalidParameter(format!(
                        "{}: K({j},{k}) = {v:e} overflows at truncation order {n}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest truncation order accepted by [`Kernel::validate_order`], capped
    /// at `limit`.
    pub fn max_order(&self, limit: usize) -> usize {
        let (mut lo, mut hi) = (1usize, limit);
        if self.validate_order(hi).is_ok() {
            return hi;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.validate_order(mid).is_ok() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Tests `K(j,k) = K(k,j)` for `1 <= j < k <= probe_bound`. The `k = 0`
    /// column is not part of near symmetry.
    pub fn check_symmetry(&self, probe_bound: usize) -> SymmetryReport {
        for j in 1..=probe_bound {
            for k in (j + 1)..=probe_bound {
                let a = self.rate_unchecked(j, k);
                let b = self.rate_unchecked(k, j);
                let scale = a.abs().max(b.abs());
                if !((a - b).abs() <= SYMMETRY_RTOL * scale) {
                    return SymmetryReport {
                        is_nearly_symmetric: false,
                        witness: Some((j, k)),
                    };
                }
            }
        }
        SymmetryReport {
            is_nearly_symmetric: true,
            witness: None,
        }
    }

    fn verify_declared_symmetry(&self) -> Result<()> {
        if self.symmetric {
            let report = self.check_symmetry(DEFAULT_PROBE_BOUND);
            if let Some((j, k)) = report.witness {
                return Err(EdgError::InvalidKernel(format!(
                    "{} declared symmetric but K({j},{k}) != K({k},{j})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Classifies the kernel from its declaration.
    pub fn classify(&self) -> Regime {
        let plain = |label| Regime {
            label,
            gelation_conjectured: false,
        };
        match self.declared {
            Declared::Nothing => plain(RegimeLabel::Unclassified),
            Declared::Sublinear => plain(RegimeLabel::SublinearFactor),
            Declared::Biased { beta, epsilon } => {
                if beta > 1.0 && epsilon > 0.0 {
                    plain(RegimeLabel::NonexistenceRiskBiased)
                } else {
                    plain(RegimeLabel::Unclassified)
                }
            }
            Declared::LowerBound { mu, nu } => {
                if !self.symmetric {
                    plain(RegimeLabel::Unclassified)
                } else if mu.max(nu) > 2.0 {
                    plain(RegimeLabel::NonexistenceRiskSymmetric)
                } else if mu + nu > 3.0 {
                    Regime {
                        label: RegimeLabel::ConjecturedGelation,
                        gelation_conjectured: true,
                    }
                } else {
                    plain(RegimeLabel::Unclassified)
                }
            }
            Declared::Power { mu, nu } => {
                let hi = mu.max(nu);
                if self.symmetric {
                    if hi <= 2.0 && mu + nu <= 3.0 {
                        plain(RegimeLabel::GlobalSymmetric)
                    } else if hi <= 2.0 && mu + nu <= 4.0 {
                        Regime {
                            label: RegimeLabel::LocalExistenceOnly,
                            gelation_conjectured: true,
                        }
                    } else {
                        // K(j,k) >= j^max(mu,nu) for k >= 1.
                        plain(RegimeLabel::NonexistenceRiskSymmetric)
                    }
                } else if hi <= 1.0 {
                    plain(RegimeLabel::GlobalNonsymmetric)
                } else {
                    plain(RegimeLabel::Unclassified)
                }
            }
        }
    }
}
