use std::path::Path;

use nfsim::harness::config::{desk_scale, paper_scale, ScenarioConfig, SimSource};
use nfsim::harness::pipeline::{self, run_cells, CellOptions};
use nfsim::harness::records::{load_csv, Provenance};
use nfsim::matio::write_rvector;
use nfsim::Error;

fn small() -> ScenarioConfig {
    let mut cfg = desk_scale();
    cfg.reduction.cov_samples = 2000;
    cfg.sweep.distances = vec![1.0, 2.0];
    cfg.sweep.trials = 200;
    cfg.sweep.localization_trials = 0;
    cfg.sweep.sim = SimSource::Off;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn covariance_files_are_reproducible() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::cmd_covariance(&cfg, a.path()).unwrap();
    pipeline::cmd_covariance(&cfg, b.path()).unwrap();
    for f in ["r_h.txt", "u.txt", "d.txt", "eigenvalues.txt", "rank_report.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn point_region_has_rank_one() {
    let mut cfg = small();
    cfg.region.diameter = 0.0;
    cfg.reduction.rank = 0;
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline::cmd_covariance(&cfg, dir.path()).unwrap();
    assert_eq!(report.numerical_rank, 1);
    assert_eq!(report.fixed_rank, 1);
}

#[test]
fn paper_preset_reports_six_dimensional_energy() {
    let mut cfg = paper_scale();
    cfg.reduction.cov_samples = 1000;
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline::cmd_covariance(&cfg, dir.path()).unwrap();
    assert_eq!(report.dimension, 256);
    assert_eq!(report.fixed_rank, 6);
    assert!(report.captured_energy_fraction > 0.0 && report.captured_energy_fraction <= 1.0 + 1e-12);
    assert_eq!(report.eigenvalues.len(), 256);
}

#[test]
fn infinite_target_returns_initial_phases() {
    let mut cfg = small();
    cfg.reduction.target_delta_u = f64::INFINITY;
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline::cmd_optimize_sim(&cfg, None, dir.path()).unwrap();
    assert!(s.converged);
    assert_eq!(s.iterations, 0);
}

#[test]
fn optimize_sim_writes_monotone_trace() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let cov_dir = tempfile::tempdir().unwrap();
    pipeline::cmd_covariance(&cfg, cov_dir.path()).unwrap();
    let s = pipeline::cmd_optimize_sim(&cfg, Some(&cov_dir.path().join("u.txt")), dir.path()).unwrap();
    assert!(s.converged, "delta_U {}", s.delta_u);
    assert!(s.delta_u <= 0.1);
    let mut rdr = csv::Reader::from_path(dir.path().join("trace.csv")).unwrap();
    let obj: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!(obj.len() > 1);
    assert!(obj.windows(2).all(|w| w[1] <= w[0]));
    for f in ["eta.txt", "projection.txt", "optimize.json"] {
        assert!(dir.path().join(f).is_file());
    }
}

#[test]
fn cells_are_independent_of_order_and_subset() {
    let cfg = small();
    let opts = CellOptions::from_config(&cfg);
    let all = run_cells(&cfg, &[(1.0, 0.0), (2.0, std::f64::consts::FRAC_PI_6)], opts).unwrap();
    let one = run_cells(&cfg, &[(2.0, std::f64::consts::FRAC_PI_6)], opts).unwrap();
    assert_eq!(all.cells[1].records, one.cells[0].records);
}

#[test]
fn sweep_output_is_deterministic_and_tables_roundtrip() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::cmd_sweep(&cfg, a.path()).unwrap();
    pipeline::cmd_sweep(&cfg, b.path()).unwrap();
    for f in ["results.csv", "results.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let recs = load_csv(&a.path().join("results.csv")).unwrap();
    assert!(!recs.is_empty());
    let tables = tempfile::tempdir().unwrap();
    let paths = pipeline::cmd_plot_data(&a.path().join("results.csv"), &cfg.sweep.angles_deg, tables.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let mut back: Vec<_> = paths.iter().flat_map(|p| load_csv(p).unwrap()).collect();
    let mut orig = recs.clone();
    let key = |r: &nfsim::harness::ResultRecord| {
        (r.angle_deg.to_bits(), r.distance.to_bits(), r.estimator.clone(), r.metric.clone(), r.snr_db.map(f64::to_bits), r.provenance as u8)
    };
    back.sort_by_key(key);
    orig.sort_by_key(key);
    assert_eq!(back, orig);
}

#[test]
fn analytic_and_monte_carlo_mse_agree() {
    let mut cfg = small();
    // Enough covariance samples that its own sampling error is small next to the Monte Carlo stderr.
    cfg.reduction.cov_samples = 100_000;
    cfg.sweep.trials = 10_000;
    cfg.sweep.sim = SimSource::Optimize;
    cfg.sweep.optimizer_starts = 3;
    let cell = pipeline::run_cell(&cfg, 1.0, 0.0, CellOptions::from_config(&cfg)).unwrap();
    let mut checked = 0;
    for mc in cell.records.iter().filter(|r| r.provenance == Provenance::MonteCarlo && r.metric == "mse") {
        let an = cell
            .records
            .iter()
            .find(|r| r.provenance == Provenance::Analytic && r.metric == "mse" && r.estimator == mc.estimator && r.snr_db == mc.snr_db)
            .unwrap();
        let z = (an.value - mc.value).abs() / mc.stderr.unwrap();
        assert!(z <= 3.0, "{} at {:?} dB: analytic {} vs {} ± {}", mc.estimator, mc.snr_db, an.value, mc.value, mc.stderr.unwrap());
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn files_mode_requires_phase_files() {
    let mut cfg = small();
    let dir = tempfile::tempdir().unwrap();
    cfg.sweep.sim = SimSource::Files;
    cfg.sweep.eta_dir = Some(dir.path().to_path_buf());
    let err = pipeline::run_cell(&cfg, 1.0, 0.0, CellOptions::from_config(&cfg)).unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "sweep.eta_dir"), "{err}");

    // Phases from an optimization run reproduce its mismatch.
    let mut opt = small();
    opt.sweep.sim = SimSource::Optimize;
    let run = pipeline::run_cell(&opt, 1.0, 0.0, CellOptions::from_config(&opt)).unwrap();
    let sim = run.sim.unwrap();
    write_rvector(&dir.path().join(nfsim::harness::config::eta_file_name(1.0, 0.0)), &sim.eta, None).unwrap();
    let loaded = pipeline::run_cell(&cfg, 1.0, 0.0, CellOptions::from_config(&cfg)).unwrap().sim.unwrap();
    assert!((loaded.delta_u - sim.delta_u).abs() < 1e-9);
}

#[test]
fn estimate_and_bounds_commands_write_reports() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let est = pipeline::cmd_estimate(&cfg, dir.path()).unwrap();
    assert!(est.records.iter().any(|r| r.estimator == "digital-baseline" && r.metric == "mse"));
    let peb = pipeline::cmd_bounds(&cfg, dir.path()).unwrap();
    assert!(peb.iter().all(|r| r.metric == "peb" && r.value > 0.0));
    for f in ["estimate.csv", "estimate.json", "bounds.csv", "bounds.json"] {
        assert!(dir.path().join(f).is_file());
    }
}
