use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edg_cli::{run_scenario, CliError, Mode, RawConfig, ScenarioConfig};

/// Exchange-driven growth scenarios: mean-field integration, identity and
/// bound diagnostics, gelation scans, blow-up probes and particle oracles.
#[derive(Parser)]
#[command(name = "edg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single integration with diagnostics.
    Run(Common),
    /// Doubling sweep over truncation orders.
    Convergence(Common),
    /// Gelation-time estimates over a kernel exponent grid.
    Gelscan(Common),
    /// Tail growth and step collapse for kernels at risk of non-existence.
    Blowup(Common),
    /// Stochastic particle ensemble.
    Mc(Common),
    /// Particle ensemble against the mean-field solution.
    McCompare(Common),
    /// Parse and check a configuration without running it.
    ValidateConfig(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (falls back to output.dir, then EDG_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and ensembles.
    #[arg(long)]
    jobs: Option<usize>,
    /// Random seed (seed); particle replica r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Particle sites (mc.sites).
    #[arg(long)]
    sites: Option<usize>,
    /// Particle replicas (mc.replicas).
    #[arg(long)]
    replicas: Option<usize>,
    /// Particle horizon (mc.t_end).
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Particle snapshot spacing (mc.snapshot_every).
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<f64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self, mode: Option<Mode>) -> Result<ScenarioConfig, CliError> {
        let text = std::fs::read_to_string(&self.config)?;
        let mut raw = RawConfig::parse(&text)?;
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mc.sites", self.sites.map(|v| v.to_string())),
            ("mc.replicas", self.replicas.map(|v| v.to_string())),
            ("mc.t_end", self.t_end.map(|v| v.to_string())),
            ("mc.snapshot_every", self.snapshot_every.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                raw.set(key, v);
            }
        }
        for item in &self.set {
            let (k, v) = item.split_once('=').ok_or_else(|| edg_cli::ConfigError::Syntax {
                line: 0,
                message: format!("--set expects KEY=VALUE, got '{item}'"),
            })?;
            raw.set(k.trim(), v.trim());
        }
        Ok(ScenarioConfig::from_raw(&raw, mode)?)
    }

    fn out_dir(&self, cfg: &ScenarioConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .or_else(|| std::env::var_os("EDG_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("edg-out"))
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let (common, mode) = match &cli.command {
        Command::Run(c) => (c, Some(Mode::Run)),
        Command::Convergence(c) => (c, Some(Mode::Convergence)),
        Command::Gelscan(c) => (c, Some(Mode::Gelscan)),
        Command::Blowup(c) => (c, Some(Mode::Blowup)),
        Command::Mc(c) => (c, Some(Mode::Mc)),
        Command::McCompare(c) => (c, Some(Mode::McCompare)),
        Command::ValidateConfig(c) => (c, None),
    };
    if let Some(jobs) = common.jobs {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    let cfg = common.load(mode)?;
    if mode.is_none() {
        println!("ok: mode {}", cfg.mode);
        return Ok(0);
    }
    let out = common.out_dir(&cfg);
    let report = run_scenario(&cfg, &out)?;
    println!(
        "{}: {} ({} files in {}, {:.2} s)",
        report.mode,
        report.outcome,
        report.manifest.len(),
        out.display(),
        report.wall_clock_seconds
    );
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("edg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
