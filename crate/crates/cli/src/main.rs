use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nfsim::harness::config::{self, ScenarioConfig, SimSource};
use nfsim::harness::pipeline;
use nfsim::{Error, Result};

/// Exit status when the SIM optimizer misses its target.
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "nfsim", version, about = "Near-field SIM channel estimation and localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled scenario: desk-scale or paper-scale.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed (overrides sweep.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ScenarioConfig::load(path)?,
            (None, Some(name)) => config::preset(name)?,
            (None, None) => config::desk_scale(),
        };
        if let Some(seed) = self.seed {
            cfg.sweep.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the channel covariance and its dominant subspace.
    Covariance(Common),
    /// Optimize the SIM phases toward the dominant subspace.
    OptimizeSim {
        #[command(flatten)]
        common: Common,
        /// Use this K×L basis instead of recomputing the covariance.
        #[arg(long)]
        subspace: Option<PathBuf>,
    },
    /// Analytic and Monte Carlo MSE of every estimator at the configured region.
    Estimate(Common),
    /// Position error bounds at the configured region.
    Bounds(Common),
    /// Full distance × angle sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads (0 uses all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// SIM source: off, optimize or files.
        #[arg(long)]
        sim: Option<String>,
        /// Directory with per-cell phase files (for --sim files).
        #[arg(long)]
        eta_dir: Option<PathBuf>,
    },
    /// Split sweep results into one table per angle.
    PlotData {
        #[command(flatten)]
        common: Common,
        /// results.csv written by `sweep`.
        #[arg(long)]
        results: PathBuf,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Covariance(c) => {
            let report = pipeline::cmd_covariance(&c.load()?, &c.out)?;
            println!(
                "numerical rank {} (99% energy rank {}), L = {} captures {:.4} of the energy",
                report.numerical_rank, report.energy_rank_99, report.fixed_rank, report.captured_energy_fraction
            );
            Ok(0)
        }
        Command::OptimizeSim { common, subspace } => {
            let s = pipeline::cmd_optimize_sim(&common.load()?, subspace.as_deref(), &common.out)?;
            println!(
                "delta_U = {:.4} (target {}), delta_rel = {:.4}, {} iterations",
                s.delta_u, s.target_delta_u, s.delta_rel, s.iterations
            );
            Ok(if s.converged { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Estimate(c) => {
            let cell = pipeline::cmd_estimate(&c.load()?, &c.out)?;
            for r in cell.records.iter().filter(|r| r.metric == "mse") {
                println!("{:<18} snr {:>5} {:?}: {:.6e}", r.estimator, r.snr_db.unwrap_or(f64::NAN), r.provenance, r.value);
            }
            Ok(if cell.sim.as_ref().is_none_or(|s| s.converged) { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Bounds(c) => {
            for r in pipeline::cmd_bounds(&c.load()?, &c.out)? {
                println!("{:<18} snr {:>5}: PEB {:.6e} m", r.estimator, r.snr_db.unwrap_or(f64::NAN), r.value);
            }
            Ok(0)
        }
        Command::Sweep { common, workers, sim, eta_dir } => {
            let mut cfg = common.load()?;
            if let Some(w) = workers {
                cfg.sweep.workers = w;
            }
            if let Some(s) = sim {
                cfg.sweep.sim = match s.as_str() {
                    "off" => SimSource::Off,
                    "optimize" => SimSource::Optimize,
                    "files" => SimSource::Files,
                    other => return Err(Error::config("sweep.sim", format!("unknown SIM source '{other}'"))),
                };
            }
            if eta_dir.is_some() {
                cfg.sweep.eta_dir = eta_dir;
            }
            let outcome = pipeline::cmd_sweep(&cfg, &common.out)?;
            println!("{} records from {} cells", outcome.records.len(), outcome.cells.len());
            Ok(if outcome.all_converged() { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::PlotData { common, results } => {
            let cfg = common.load()?;
            for p in pipeline::cmd_plot_data(&results, &cfg.sweep.angles_deg, &common.out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing_subscriber::filter::LevelFilter::INFO } else { tracing_subscriber::filter::LevelFilter::WARN };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
