//! End-to-end pipelines behind the command-line subcommands.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{disk_at, eta_file_name, ScenarioConfig, SimSource};
use super::records::{self, Provenance, ResultRecord};
use crate::bounds::{mismatch_metrics, peb_from_residual, ChannelParams};
use crate::channel::{estimate_covariance, reduce_subspace, CovarianceModel, RankReport, Subspace};
use crate::error::{Error, Result};
use crate::estimation::{
    digital_baseline_estimator, mmse_post_sim_estimator, mmse_reduced_estimator, monte_carlo_mse, noise_variance_for_snr,
    rsls_ideal_estimator, rsls_post_sim_estimator, summarize, ChannelSource, EstimatorTag, LinearEstimator,
    ObservationMode, ObservationModel,
};
use crate::geometry::{build_sim_geometry, ArrayGeometry, PositionPrior, SimLayout, UniformDisk};
use crate::linalg::CMat;
use crate::localizer::localize;
use crate::matio::{read_cmatrix, read_rvector, write_cmatrix, write_rvector};
use crate::multiport::SimNetwork;
use crate::rng::{complex_normal_vec, derive_seed, stream_rng};
use crate::simopt::{optimize_multistart, realized_projection, OptimizationTrace, OptimizerConfig};

/// Seed for one sweep cell; depends only on the master seed and the cell's
/// coordinates, so any subset of cells reproduces the same values.
pub fn cell_seed(master: u64, distance: f64, angle: f64) -> u64 {
    derive_seed(derive_seed(master, distance.to_bits()), angle.to_bits())
}

const COVARIANCE_STREAM: u64 = 1;
const OPTIMIZER_STREAM: u64 = 2;
const ESTIMATION_STREAM: u64 = 3;
const LOCALIZATION_STREAM: u64 = 4;

/// Channel statistics and geometry for one region.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub region: UniformDisk,
    pub layout: SimLayout,
    pub input: ArrayGeometry,
    pub cov: CovarianceModel,
    pub sub: Subspace,
}

pub fn prepare(cfg: &ScenarioConfig, region: UniformDisk, seed: u64) -> Result<Prepared> {
    let input = build_sim_geometry(&cfg.geometry, 1)?.input();
    let cov = estimate_covariance(
        &input,
        &region,
        &cfg.gain,
        cfg.reduction.cov_samples,
        derive_seed(seed, COVARIANCE_STREAM),
        cfg.reduction.rank_threshold,
    )?;
    let l = cfg.rank_for(cov.rank);
    if cfg.geometry.receivers != 0 && cfg.geometry.receivers != l {
        return Err(Error::config(
            "geometry.receivers",
            format!("must be 0 or equal to the subspace rank {l}, got {}", cfg.geometry.receivers),
        ));
    }
    let sub = reduce_subspace(&cov, Some(l))?;
    let layout = build_sim_geometry(&cfg.geometry, l)?;
    Ok(Prepared { region, layout, input, cov, sub })
}

pub fn optimizer_config(cfg: &ScenarioConfig) -> OptimizerConfig {
    OptimizerConfig { target_delta_u: cfg.reduction.target_delta_u, ..cfg.optimizer.clone() }
}

/// SIM configuration realized for one cell.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub eta: Vec<f64>,
    /// Raw port-to-receiver projection.
    pub v: CMat,
    /// Projection after the receiver combiner; handed to the estimators.
    pub realized: CMat,
    pub delta_u: f64,
    pub delta_rel: f64,
    pub converged: bool,
    pub trace: Option<OptimizationTrace>,
}

fn network(cfg: &ScenarioConfig, prep: &Prepared) -> Result<SimNetwork> {
    SimNetwork::from_layout(&prep.layout, &cfg.impedance.provider()?)
}

/// Optimize the SIM phases for `prep.sub` with `cfg.sweep.optimizer_starts` seeded starts.
pub fn optimize_sim(cfg: &ScenarioConfig, prep: &Prepared, seed: u64) -> Result<SimOutcome> {
    let mut net = network(cfg, prep)?;
    let opt = optimizer_config(cfg);
    let base = derive_seed(seed, OPTIMIZER_STREAM);
    let seeds: Vec<u64> = (0..cfg.sweep.optimizer_starts as u64).map(|i| derive_seed(base, i)).collect();
    let trace = optimize_multistart(&mut net, &prep.sub.u, &opt, &seeds)?;
    finish_sim(cfg, prep, &net, Some(trace))
}

/// Evaluate the SIM at given phases.
pub fn sim_from_eta(cfg: &ScenarioConfig, prep: &Prepared, eta: &[f64]) -> Result<SimOutcome> {
    let mut net = network(cfg, prep)?;
    net.set_eta(eta)?;
    finish_sim(cfg, prep, &net, None)
}

fn finish_sim(cfg: &ScenarioConfig, prep: &Prepared, net: &SimNetwork, trace: Option<OptimizationTrace>) -> Result<SimOutcome> {
    let v = net.effective_projection()?;
    let realized = realized_projection(&v, &prep.sub.u, cfg.optimizer.fit_mode)?;
    let m = mismatch_metrics(&realized, &prep.sub.u)?;
    Ok(SimOutcome {
        eta: net.eta.clone(),
        v,
        realized,
        delta_u: m.delta_u,
        delta_rel: m.delta_rel,
        converged: m.delta_u <= cfg.reduction.target_delta_u,
        trace,
    })
}

/// What a cell computes beyond the analytic quantities.
#[derive(Debug, Clone, Copy)]
pub struct CellOptions {
    pub monte_carlo_trials: usize,
    pub localization_trials: usize,
    pub sim: SimSource,
}

impl CellOptions {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        CellOptions {
            monte_carlo_trials: cfg.sweep.trials,
            localization_trials: cfg.sweep.localization_trials,
            sim: cfg.sweep.sim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub distance: f64,
    pub angle: f64,
    pub records: Vec<ResultRecord>,
    pub sim: Option<SimOutcome>,
}

struct Emitter<'a> {
    scenario: &'a str,
    distance: f64,
    angle_deg: f64,
    out: Vec<ResultRecord>,
}

impl Emitter<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, estimator: &str, snr: Option<f64>, metric: &str, value: f64, stderr: Option<f64>, trials: Option<usize>) {
        self.out.push(ResultRecord {
            scenario: self.scenario.to_string(),
            estimator: estimator.to_string(),
            distance: self.distance,
            angle_deg: self.angle_deg,
            snr_db: snr,
            metric: metric.to_string(),
            value,
            stderr,
            provenance: if stderr.is_some() { Provenance::MonteCarlo } else { Provenance::Analytic },
            trials,
        });
    }
}

/// Bearing in degrees, rounded to nanodegrees so configured values survive the radian round trip.
pub fn degrees(angle: f64) -> f64 {
    (angle.to_degrees() * 1e9).round() / 1e9
}

/// Estimators for one cell at one noise level, in output order.
pub fn cell_estimators(prep: &Prepared, sim: Option<&SimOutcome>, sigma_z2: f64) -> Result<Vec<(LinearEstimator, ObservationModel)>> {
    let r_h = &prep.cov.r_h;
    let uh = prep.sub.u.adjoint();
    let mut mmse_ideal = mmse_reduced_estimator(r_h, &prep.sub, sigma_z2)?;
    mmse_ideal.tag = EstimatorTag::MmseIdeal;
    let ideal = ObservationModel::new(ObservationMode::IdealProjection(uh), sigma_z2)?;
    let mut out = vec![
        (mmse_ideal, ideal.clone()),
        (rsls_ideal_estimator(r_h, &prep.sub, sigma_z2)?, ideal),
    ];
    if let Some(sim) = sim {
        let obs = ObservationModel::new(ObservationMode::SimProjection(sim.realized.clone()), sigma_z2)?;
        out.push((mmse_post_sim_estimator(&sim.realized, r_h, &prep.sub, sigma_z2)?, obs.clone()));
        out.push((rsls_post_sim_estimator(&sim.realized, r_h, &prep.sub, sigma_z2)?, obs));
    }
    out.push((
        digital_baseline_estimator(r_h, sigma_z2)?,
        ObservationModel::new(ObservationMode::DigitalBaseline, sigma_z2)?,
    ));
    Ok(out)
}

/// Number of eigenvalues of `R_h` above the noise floor.
pub fn effective_rank(cov: &CovarianceModel, sigma_z2: f64) -> usize {
    cov.modes_above(sigma_z2)
}

/// Everything the sweep reports for one (distance, angle) cell.
pub fn run_cell(cfg: &ScenarioConfig, distance: f64, angle: f64, opts: CellOptions) -> Result<CellOutcome> {
    let seed = cell_seed(cfg.sweep.seed, distance, angle);
    let region = disk_at(distance, angle, cfg.region.diameter)?;
    let prep = prepare(cfg, region, seed)?;
    let sim = match opts.sim {
        SimSource::Off => None,
        SimSource::Optimize => Some(optimize_sim(cfg, &prep, seed)?),
        SimSource::Files => {
            let dir = cfg
                .sweep
                .eta_dir
                .as_ref()
                .ok_or_else(|| Error::config("sweep.eta_dir", "required when sweep.sim = \"files\""))?;
            let path = dir.join(eta_file_name(distance, angle));
            if !path.is_file() {
                return Err(Error::config("sweep.eta_dir", format!("missing phase file {}", path.display())));
            }
            Some(sim_from_eta(cfg, &prep, &read_rvector(&path)?)?)
        }
    };

    let mut em = Emitter { scenario: &cfg.name, distance, angle_deg: degrees(angle), out: Vec::new() };
    em.push("channel", None, "numerical_rank", prep.cov.rank as f64, None, None);
    em.push("channel", None, "captured_energy", prep.cov.captured_energy(prep.sub.rank()), None, None);
    if let Some(s) = &sim {
        em.push("sim", None, "delta_u", s.delta_u, None, None);
        em.push("sim", None, "delta_rel", s.delta_rel, None, None);
        em.push("sim", None, "converged", if s.converged { 1.0 } else { 0.0 }, None, None);
    }

    let center = prep.region.center;
    let eps = ChannelParams { x: center.x, y: center.y, gain: cfg.gain.second_moment().sqrt(), phase: 0.0 };
    let source = ChannelSource::Physical { geometry: &prep.input, region: &prep.region, gains: &cfg.gain };
    for (si, &snr) in cfg.noise.snr_db.iter().enumerate() {
        let s = Some(snr);
        let sigma_z2 = noise_variance_for_snr(&prep.cov.r_h, snr);
        let snr_seed = derive_seed(seed, 100 + si as u64);
        em.push("channel", s, "effective_rank", effective_rank(&prep.cov, sigma_z2) as f64, None, None);
        em.push("observation", s, "peb", crate::bounds::fim_peb(&prep.input, &eps, 0.5 * sigma_z2)?.peb, None, None);
        for (ei, (est, obs)) in cell_estimators(&prep, sim.as_ref(), sigma_z2)?.into_iter().enumerate() {
            let tag = est.tag.as_str();
            let exact = est.exact_error_covariance(&prep.cov.r_h, sigma_z2);
            em.push(tag, s, "mse", crate::linalg::trace_re(&exact), None, None);
            em.push(tag, s, "mse_subspace", est.scalar_mse(), None, None);
            em.push(tag, s, "peb", peb_from_residual(&prep.input, &eps, &exact, cfg.noise.mapping)?.peb, None, None);
            if opts.monte_carlo_trials > 0 {
                let mc_seed = derive_seed(derive_seed(snr_seed, ESTIMATION_STREAM), ei as u64);
                let mc = monte_carlo_mse(&obs, &est, &source, opts.monte_carlo_trials, mc_seed)?;
                em.push(tag, s, "mse", mc.mse, Some(mc.stderr), Some(mc.trials));
            }
            if opts.localization_trials > 0 {
                let loc_seed = derive_seed(derive_seed(snr_seed, LOCALIZATION_STREAM), ei as u64);
                let (rmse, stderr) = localization_rmse(cfg, &prep, &est, &obs, &source, opts.localization_trials, loc_seed)?;
                em.push(tag, s, "loc_rmse", rmse, Some(stderr), Some(opts.localization_trials));
            }
        }
    }
    Ok(CellOutcome { distance, angle, records: em.out, sim })
}

/// RMSE of the localizer fed with channel estimates, over fresh channel and
/// noise draws; the stderr is that of the RMSE (delta method).
pub fn localization_rmse(
    cfg: &ScenarioConfig,
    prep: &Prepared,
    est: &LinearEstimator,
    obs: &ObservationModel,
    source: &ChannelSource<'_>,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let k = prep.input.len();
    let sq: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let p = prep.region.sample_at(seed, i);
            let h = source.draw(seed, i);
            let mut rng = stream_rng(seed ^ 0x10c0_0000, i);
            let z = complex_normal_vec(&mut rng, k, obs.noise_variance);
            let h_hat = est.estimate(&obs.observe(&h, &z))?;
            let loc = localize(&h_hat, &prep.input, &prep.region, &cfg.localizer)?;
            Ok(loc.position.distance(&p).powi(2))
        })
        .collect::<Result<_>>()?;
    let s = summarize(&sq);
    let rmse = s.mse.sqrt();
    let stderr = if rmse > 0.0 { s.stderr / (2.0 * rmse) } else { 0.0 };
    Ok((rmse, stderr))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<ResultRecord>,
    pub cells: Vec<CellOutcome>,
}

impl SweepOutcome {
    /// False when any cell's SIM missed the target.
    pub fn all_converged(&self) -> bool {
        self.cells.iter().all(|c| c.sim.as_ref().is_none_or(|s| s.converged))
    }
}

/// The sweep grid in output order (angle-major).
pub fn sweep_cells(cfg: &ScenarioConfig) -> Vec<(f64, f64)> {
    cfg.angles()
        .into_iter()
        .flat_map(|a| cfg.sweep.distances.iter().map(move |&d| (d, a)))
        .collect()
}

/// Run the given cells concurrently on `cfg.sweep.workers` threads; records
/// come back in the order of `cells`.
pub fn run_cells(cfg: &ScenarioConfig, cells: &[(f64, f64)], opts: CellOptions) -> Result<SweepOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers)
        .build()
        .map_err(|e| Error::config("sweep.workers", e.to_string()))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(d, a)| {
                let out = run_cell(cfg, d, a, opts);
                if let Ok(c) = &out {
                    tracing::info!(distance = d, angle = a, records = c.records.len(), "cell done");
                }
                out
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records = outcomes.iter().flat_map(|c| c.records.iter().cloned()).collect();
    Ok(SweepOutcome { records, cells: outcomes })
}

pub fn sweep(cfg: &ScenarioConfig) -> Result<SweepOutcome> {
    run_cells(cfg, &sweep_cells(cfg), CellOptions::from_config(cfg))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `covariance`: `r_h.txt`, `u.txt`, `d.txt`, `eigenvalues.txt`, `rank_report.json`.
pub fn cmd_covariance(cfg: &ScenarioConfig, out: &Path) -> Result<RankReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let prep = prepare(cfg, cfg.region.disk()?, cfg.sweep.seed)?;
    write_cmatrix(&out.join("r_h.txt"), &prep.cov.r_h, Some("channel covariance R_h"))?;
    write_cmatrix(&out.join("u.txt"), &prep.sub.u, Some("dominant eigenvectors U (K x L)"))?;
    write_rvector(&out.join("d.txt"), &prep.sub.d, Some("dominant eigenvalues"))?;
    write_rvector(&out.join("eigenvalues.txt"), &prep.cov.eigenvalues, Some("eigenvalues of R_h, descending"))?;
    let report = RankReport::new(&prep.cov, prep.sub.rank());
    records::save_json(&report, &out.join("rank_report.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeSummary {
    pub converged: bool,
    pub delta_u: f64,
    pub delta_rel: f64,
    pub iterations: usize,
    pub target_delta_u: f64,
}

/// `optimize-sim`: `eta.txt`, `trace.csv`, `projection.txt`, `optimize.json`.
///
/// The trace and phases are written whether or not the target was reached.
pub fn cmd_optimize_sim(cfg: &ScenarioConfig, subspace: Option<&Path>, out: &Path) -> Result<OptimizeSummary> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mut prep = prepare(cfg, cfg.region.disk()?, cfg.sweep.seed)?;
    if let Some(path) = subspace {
        let u = read_cmatrix(path)?;
        if u.nrows() != prep.input.len() || u.ncols() != prep.sub.rank() {
            return Err(Error::dimension(
                "subspace file",
                format!("{}x{}", prep.input.len(), prep.sub.rank()),
                format!("{}x{}", u.nrows(), u.ncols()),
            ));
        }
        prep.sub.u = u;
    }
    let sim = optimize_sim(cfg, &prep, cfg.sweep.seed)?;
    let trace = sim.trace.as_ref().expect("optimizer trace");
    write_rvector(&out.join("eta.txt"), &sim.eta, Some("SIM phases, radians"))?;
    trace.save_csv(&out.join("trace.csv"))?;
    write_cmatrix(&out.join("projection.txt"), &sim.realized, Some("realized projection (L x K)"))?;
    let summary = OptimizeSummary {
        converged: sim.converged,
        delta_u: sim.delta_u,
        delta_rel: sim.delta_rel,
        iterations: trace.iterations(),
        target_delta_u: cfg.reduction.target_delta_u,
    };
    records::save_json(&summary, &out.join("optimize.json"))?;
    Ok(summary)
}

/// `estimate`: every estimator at the configured region, `estimate.csv` and `estimate.json`.
pub fn cmd_estimate(cfg: &ScenarioConfig, out: &Path) -> Result<CellOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    let opts = CellOptions { localization_trials: 0, ..CellOptions::from_config(cfg) };
    let cell = run_cell(cfg, cfg.region.center_distance, cfg.region.angle_deg.to_radians(), opts)?;
    let recs: Vec<_> = cell.records.iter().filter(|r| r.metric.starts_with("mse") || r.estimator == "sim").cloned().collect();
    records::save_csv(&recs, &out.join("estimate.csv"))?;
    records::save_json(&recs, &out.join("estimate.json"))?;
    Ok(CellOutcome { records: recs, ..cell })
}

/// `bounds`: PEB for the raw observation and every estimator residual, `bounds.csv` and `bounds.json`.
pub fn cmd_bounds(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let opts = CellOptions { monte_carlo_trials: 0, localization_trials: 0, ..CellOptions::from_config(cfg) };
    let cell = run_cell(cfg, cfg.region.center_distance, cfg.region.angle_deg.to_radians(), opts)?;
    let recs: Vec<_> = cell.records.into_iter().filter(|r| r.metric == "peb").collect();
    records::save_csv(&recs, &out.join("bounds.csv"))?;
    records::save_json(&recs, &out.join("bounds.json"))?;
    Ok(recs)
}

/// `sweep`: `results.csv` and `results.json`.
pub fn cmd_sweep(cfg: &ScenarioConfig, out: &Path) -> Result<SweepOutcome> {
    ensure_dir(out)?;
    let outcome = sweep(cfg)?;
    records::save_csv(&outcome.records, &out.join("results.csv"))?;
    records::save_json(&outcome.records, &out.join("results.json"))?;
    Ok(outcome)
}

/// `plot-data`: one tidy table per bearing angle.
pub fn cmd_plot_data(results: &Path, angles_deg: &[f64], out: &Path) -> Result<Vec<std::path::PathBuf>> {
    let recs = records::load_csv(results)?;
    records::write_tables(&recs, angles_deg, out)
}
