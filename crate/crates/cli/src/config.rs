//! Flat `key = value` scenario files with dotted keys.
//!
//! ```text
//! # jk reference run
//! mode = run
//! kernel.type = product
//! kernel.mu = 1
//! kernel.classical_mode = true
//! ic.type = monodisperse
//! ic.n = 200
//! solver.t_end = 5
//! ```
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Every key must be understood by the selected mode; leftovers are errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use edg_core::kernel::Kernel;
use edg_core::state::{Amplitude, EmptyVolume, InitialSpec};
use edg_core::IntegratorConfig;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key '{key}' given twice")]
    Duplicate { key: String, line: usize },
    #[error("missing required key '{key}'")]
    Missing { key: String },
    #[error("key '{key}': cannot use '{value}': {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown key '{key}' for mode {mode}")]
    Unknown { key: String, mode: Mode },
}

impl ConfigError {
    /// Dotted path of the offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::Syntax { .. } => None,
            Self::Duplicate { key, .. }
            | Self::Missing { key }
            | Self::Invalid { key, .. }
            | Self::Unknown { key, .. } => Some(key),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Convergence,
    Gelscan,
    Blowup,
    Mc,
    McCompare,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Convergence => "convergence",
            Mode::Gelscan => "gelscan",
            Mode::Blowup => "blowup",
            Mode::Mc => "mc",
            Mode::McCompare => "mc-compare",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "run" => Mode::Run,
            "convergence" => Mode::Convergence,
            "gelscan" => Mode::Gelscan,
            "blowup" => Mode::Blowup,
            "mc" => Mode::Mc,
            "mc-compare" => Mode::McCompare,
            other => return Err(format!("unknown mode '{other}'")),
        })
    }
}

/// Parsed but untyped key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("expected 'key = value', got '{body}'"),
                });
            };
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| {
                    !part.is_empty()
                        && part
                            .chars()
                            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                });
            if !valid {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("malformed key '{key}'"),
                });
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Sets or replaces a key, as command-line overrides do.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }
}

/// Typed access that remembers which keys were consumed.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self {
            raw,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn text(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().insert(key.to_string());
        self.raw.get(key)
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.text(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.into(),
                    value: v.into(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn req<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.opt(key)?
            .ok_or_else(|| ConfigError::Missing { key: key.into() })
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.text(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                item.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.into(),
                    value: v.into(),
                    reason: format!("'{item}': {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn req_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.list(key)? {
            Some(v) if !v.is_empty() => Ok(v),
            Some(_) => Err(invalid(key, "", "list is empty")),
            None => Err(ConfigError::Missing { key: key.into() }),
        }
    }

    fn leftovers(&self, mode: Mode) -> Result<()> {
        let used = self.used.borrow();
        match self.raw.entries.keys().find(|k| !used.contains(*k)) {
            Some(key) => Err(ConfigError::Unknown {
                key: key.clone(),
                mode,
            }),
            None => Ok(()),
        }
    }
}

fn invalid(key: &str, value: impl fmt::Display, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum KernelChoice {
    Constant,
    Product { mu: f64 },
    Power { mu: f64, nu: f64 },
    Sum { mu: f64, nu: f64 },
    Biased { beta: f64, epsilon: f64 },
    Builtin { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelConfig {
    #[serde(flatten)]
    pub choice: KernelChoice,
    pub classical: bool,
}

impl KernelConfig {
    pub fn build(&self) -> edg_core::Result<Kernel> {
        let classical = self.classical;
        match &self.choice {
            KernelChoice::Constant => Ok(Kernel::constant(classical)),
            KernelChoice::Product { mu } => Kernel::product(*mu, classical),
            KernelChoice::Power { mu, nu } => Kernel::power(*mu, *nu, classical),
            KernelChoice::Sum { mu, nu } => Kernel::symmetric_sum(*mu, *nu, classical),
            KernelChoice::Biased { beta, epsilon } => Kernel::biased(*beta, *epsilon),
            KernelChoice::Builtin { name } => Kernel::builtin(name, classical),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitialConfig {
    pub spec: InitialSpec,
    /// Truncation order, when the mode uses a single one.
    pub n: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsConfig {
    pub tail_m: Vec<usize>,
    pub identity_checks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GelscanConfig {
    pub n_list: Vec<usize>,
    pub threshold: f64,
    pub mu: Vec<f64>,
    /// Empty means `nu = mu` at every grid point.
    pub nu: Vec<f64>,
    pub increase_per_doubling: f64,
    pub stable_per_doubling: f64,
    pub classical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlowupConfig {
    pub m_list: Vec<usize>,
    /// Skip the regime check and probe a regular kernel as a control.
    pub control: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McConfig {
    pub sites: usize,
    pub replicas: usize,
    pub t_end: f64,
    pub snapshot_every: f64,
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Kernel for every mode except gelscan, which sweeps its own grid.
    pub kernel: Option<KernelConfig>,
    pub initial: InitialConfig,
    pub solver: Option<IntegratorConfig>,
    pub diagnostics: DiagnosticsConfig,
    pub convergence_n: Vec<usize>,
    pub gelscan: Option<GelscanConfig>,
    pub blowup: Option<BlowupConfig>,
    pub mc: Option<McConfig>,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Types and validates `raw`. `mode` wins over a `mode` key, which must
    /// then agree with it.
    pub fn from_raw(raw: &RawConfig, mode: Option<Mode>) -> Result<Self> {
        let r = Reader::new(raw);
        let declared: Option<String> = r.opt("mode")?;
        let mode = match (mode, declared) {
            (Some(m), None) => m,
            (None, Some(d)) => d.parse().map_err(|e: String| invalid("mode", &d, e))?,
            (Some(m), Some(d)) => {
                if d != m.name() {
                    return Err(invalid("mode", &d, format!("subcommand is {m}")));
                }
                m
            }
            (None, None) => return Err(ConfigError::Missing { key: "mode".into() }),
        };
        let seed = r.or("seed", 0u64)?;
        let output_dir = r.opt::<String>("output.dir")?.map(PathBuf::from);

        let kernel = match mode {
            Mode::Gelscan => {
                if let Some(t) = r.text("kernel.type") {
                    if t != "power" && t != "product" {
                        return Err(invalid("kernel.type", t, "gelscan sweeps power kernels"));
                    }
                }
                None
            }
            _ => Some(kernel_config(&r)?),
        };
        let needs_n = matches!(mode, Mode::Run | Mode::Blowup | Mode::McCompare);
        let initial = initial_config(&r, needs_n, mode)?;

        let mc = if matches!(mode, Mode::Mc | Mode::McCompare) {
            let sites: usize = r.req("mc.sites")?;
            if sites < 2 {
                return Err(invalid("mc.sites", sites, "need at least two sites"));
            }
            let t_end: f64 = r.req("mc.t_end")?;
            if !(t_end.is_finite() && t_end >= 0.0) {
                return Err(invalid("mc.t_end", t_end, "must be finite and nonnegative"));
            }
            let every = r.or("mc.snapshot_every", if t_end > 0.0 { t_end / 10.0 } else { 1.0 })?;
            if !(every.is_finite() && every > 0.0) {
                return Err(invalid("mc.snapshot_every", every, "must be positive"));
            }
            let replicas = r.or("mc.replicas", 8usize)?;
            if replicas == 0 {
                return Err(invalid("mc.replicas", 0, "need at least one replica"));
            }
            Some(McConfig {
                sites,
                replicas,
                t_end,
                snapshot_every: every,
            })
        } else {
            None
        };

        let solver = match (mode, &mc) {
            (Mode::Mc, _) => None,
            (Mode::McCompare, Some(mc)) => {
                // the ODE side of a comparison shares the particle grid
                let mut s = solver_config(&r, Some(mc.t_end))?;
                s.record_every = mc.snapshot_every;
                Some(s)
            }
            _ => Some(solver_config(&r, None)?),
        };

        let diagnostics = DiagnosticsConfig {
            tail_m: r.list("diagnostics.tail_m")?.unwrap_or_default(),
            identity_checks: r.or("diagnostics.identity_checks", false)?,
        };
        if let (Some(n), Some(&m)) = (initial.n, diagnostics.tail_m.iter().max()) {
            if m > n {
                return Err(invalid("diagnostics.tail_m", m, format!("exceeds ic.n = {n}")));
            }
        }
        if diagnostics.identity_checks && diagnostics.tail_m.is_empty() {
            return Err(ConfigError::Missing {
                key: "diagnostics.tail_m".into(),
            });
        }

        let convergence_n = if mode == Mode::Convergence {
            let list: Vec<usize> = r.req_list("convergence.n_list")?;
            check_sizes("convergence.n_list", &list)?;
            list
        } else {
            Vec::new()
        };

        let gelscan = if mode == Mode::Gelscan {
            let g = GelscanConfig {
                n_list: r.req_list("gelscan.n_list")?,
                threshold: r.or("gelscan.threshold", 100.0)?,
                mu: r.req_list("gelscan.mu")?,
                nu: r.list("gelscan.nu")?.unwrap_or_default(),
                increase_per_doubling: r.or("gelscan.increase_per_doubling", 0.2)?,
                stable_per_doubling: r.or("gelscan.stable_per_doubling", 0.05)?,
                classical: r.or("kernel.classical_mode", false)?,
            };
            check_sizes("gelscan.n_list", &g.n_list)?;
            if g.n_list.len() < 3 || g.n_list.windows(2).any(|w| w[1] < 2 * w[0]) {
                return Err(invalid(
                    "gelscan.n_list",
                    format!("{:?}", g.n_list),
                    "need at least three sizes, each at least double the previous",
                ));
            }
            if !(g.threshold > 1.0) {
                return Err(invalid("gelscan.threshold", g.threshold, "must exceed 1"));
            }
            if !g.nu.is_empty() && g.nu.len() != g.mu.len() {
                return Err(invalid(
                    "gelscan.nu",
                    format!("{:?}", g.nu),
                    "must be empty or as long as gelscan.mu",
                ));
            }
            Some(g)
        } else {
            None
        };

        let blowup = if mode == Mode::Blowup {
            let b = BlowupConfig {
                m_list: r.req_list("blowup.m_list")?,
                control: r.or("blowup.control", false)?,
            };
            let n = initial.n.unwrap_or(0);
            if let Some(&m) = b.m_list.iter().find(|&&m| m > n) {
                return Err(invalid("blowup.m_list", m, format!("exceeds ic.n = {n}")));
            }
            Some(b)
        } else {
            None
        };

        let cfg = Self {
            mode,
            seed,
            kernel,
            initial,
            solver,
            diagnostics,
            convergence_n,
            gelscan,
            blowup,
            mc,
            output_dir,
        };
        if let Some(solver) = &cfg.solver {
            solver.validate().map_err(|e| invalid("solver", "", e.to_string()))?;
        }
        if let Some(kc) = &cfg.kernel {
            kc.build().map_err(|e| invalid("kernel", "", e.to_string()))?;
        }
        r.leftovers(mode)?;
        Ok(cfg)
    }
}

fn check_sizes(key: &str, list: &[usize]) -> Result<()> {
    if list.iter().any(|&n| n == 0) {
        return Err(invalid(key, format!("{list:?}"), "sizes must be positive"));
    }
    if list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(key, format!("{list:?}"), "sizes must increase"));
    }
    Ok(())
}

const BUILTIN_KERNELS: &[&str] = &["sqrt-product", "log-product", "zero"];

fn kernel_config(r: &Reader<'_>) -> Result<KernelConfig> {
    let kind: String = r.req("kernel.type")?;
    let choice = match kind.as_str() {
        "constant" => KernelChoice::Constant,
        "product" => KernelChoice::Product {
            mu: r.req("kernel.mu")?,
        },
        "power" => KernelChoice::Power {
            mu: r.req("kernel.mu")?,
            nu: r.req("kernel.nu")?,
        },
        "sum" => KernelChoice::Sum {
            mu: r.req("kernel.mu")?,
            nu: r.req("kernel.nu")?,
        },
        "biased" => KernelChoice::Biased {
            beta: r.req("kernel.beta")?,
            epsilon: r.req("kernel.epsilon")?,
        },
        "builtin" => KernelChoice::Builtin {
            name: r.req("kernel.name")?,
        },
        // a built-in callback kernel may also be named directly
        name if BUILTIN_KERNELS.contains(&name) => KernelChoice::Builtin {
            name: name.to_string(),
        },
        other => {
            return Err(invalid(
                "kernel.type",
                other,
                "expected constant, product, power, sum, biased, builtin or a built-in kernel name",
            ))
        }
    };
    Ok(KernelConfig {
        choice,
        classical: r.or("kernel.classical_mode", false)?,
    })
}

fn amplitude(r: &Reader<'_>) -> Result<Amplitude> {
    let scale: Option<f64> = r.opt("ic.scale")?;
    let occupied: Option<f64> = r.opt("ic.occupied")?;
    match (scale, occupied) {
        (Some(_), Some(_)) => Err(invalid(
            "ic.occupied",
            "",
            "give either ic.scale or ic.occupied, not both",
        )),
        (_, Some(f)) => Ok(Amplitude::OccupiedFraction(f)),
        (a, None) => Ok(Amplitude::Scale(a.unwrap_or(1.0))),
    }
}

fn initial_config(r: &Reader<'_>, needs_n: bool, mode: Mode) -> Result<InitialConfig> {
    let kind: String = r.req("ic.type")?;
    let spec = match kind.as_str() {
        "monodisperse" => InitialSpec::monodisperse(r.or("ic.rho", 1.0)?),
        "geometric" => InitialSpec::geometric(r.req("ic.kappa")?, amplitude(r)?),
        "algebraic" => InitialSpec::algebraic(r.req("ic.q")?, amplitude(r)?),
        "explicit" => InitialSpec::explicit(r.req_list("ic.values")?),
        other => {
            return Err(invalid(
                "ic.type",
                other,
                "expected monodisperse, geometric, algebraic or explicit",
            ))
        }
    };
    let m0: Option<f64> = r.opt("ic.m0")?;
    let c0: Option<f64> = r.opt("ic.c0")?;
    let empty = match (m0, c0) {
        (Some(_), Some(_)) => {
            return Err(invalid("ic.c0", "", "ic.c0 and ic.m0 exclude each other"))
        }
        (_, Some(c0)) => {
            if matches!(mode, Mode::Mc | Mode::McCompare) {
                return Err(invalid("ic.c0", c0, "particle runs need a normalized start"));
            }
            EmptyVolume::Fixed(c0)
        }
        (m0, None) => EmptyVolume::Remainder {
            m0: m0.unwrap_or(1.0),
        },
    };
    let spec = spec.with_empty(empty);
    let n = match mode {
        Mode::Convergence | Mode::Gelscan => None,
        Mode::Mc => Some(r.or("ic.n", 100usize)?),
        _ if needs_n => Some(r.req("ic.n")?),
        _ => r.opt("ic.n")?,
    };
    if let Some(n) = n {
        edg_core::init_distribution(&spec, n).map_err(|e| invalid("initial", &kind, e.to_string()))?;
    } else {
        edg_core::init_distribution(&spec, 64)
            .map_err(|e| invalid("initial", &kind, e.to_string()))?;
    }
    Ok(InitialConfig { spec, n })
}

fn solver_config(r: &Reader<'_>, t_end: Option<f64>) -> Result<IntegratorConfig> {
    let t_end = match t_end {
        Some(t) => t,
        None => r.req("solver.t_end")?,
    };
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(invalid("solver.t_end", t_end, "must be finite and nonnegative"));
    }
    let mut s = IntegratorConfig::new(t_end);
    s.rtol = r.or("solver.rtol", s.rtol)?;
    s.atol = r.or("solver.atol", s.atol)?;
    s.dt_init = r.or("solver.dt_init", s.dt_init)?;
    s.dt_min = r.or("solver.dt_min", s.dt_min)?;
    s.dt_max = r.or("solver.dt_max", s.dt_max)?;
    s.record_every = r.or("solver.record_every", s.record_every)?;
    s.negativity_floor = r.or("solver.negativity_floor", s.negativity_floor)?;
    s.stiffening_limit = r.or("solver.stiffening_limit", s.stiffening_limit)?;
    s.max_steps = r.or("solver.max_steps", s.max_steps)?;
    if let Some(p) = r.list::<f64>("diagnostics.moments")? {
        s.moment_exponents = p;
    }
    Ok(s)
}
