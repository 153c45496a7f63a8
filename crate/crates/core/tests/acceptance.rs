//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nfsim::bounds::{channel_jacobian, fim_peb, gram_eigenvalues, mismatch_metrics, mse_ratio_bound, mse_ratio_check, ChannelParams};
use nfsim::channel::{channel_at, reduce_subspace, CovarianceModel};
use nfsim::estimation::{
    mmse_full, mmse_reduced_estimator, mmse_spectral_estimator, monte_carlo_mse, noise_variance_for_snr, rsls_ideal_estimator,
    ChannelSource, ObservationMode, ObservationModel,
};
use nfsim::geometry::{build_sim_geometry, fraunhofer_distance, Point2, UniformDisk};
use nfsim::harness::config::{desk_scale, paper_scale, SimSource};
use nfsim::harness::pipeline::{self, prepare, run_cells, sweep_cells, CellOptions, SweepOutcome};
use nfsim::harness::records::{Provenance, ResultRecord};
use nfsim::linalg::{c64, orthonormalize_rows, CMat, CVec};
use nfsim::localizer::{coarse_points, localization_trials, localize, rmse, LocalizerConfig};
use nfsim::multiport::SimNetwork;
use nfsim::rng::{complex_normal, stream_rng};
use nfsim::simopt::{evaluate, finite_difference_gradient, optimize, random_eta, Fit, Scale};

/// Mismatch target and the corresponding RS-LS degradation factor.
const DELTA_U_TARGET: f64 = 0.1;
const RATIO_LIMIT: f64 = 1.266;
/// Relative advantage of the digital baseline over reduced MMSE counted as "better".
const BASELINE_MARGIN: f64 = 0.10;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_cmat(r: usize, c: usize, seed: u64) -> CMat {
    let mut rng = stream_rng(seed, 0);
    CMat::from_fn(r, c, |_, _| complex_normal(&mut rng, 1.0))
}

fn rel(a: &CVec, b: &CVec) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn criterion_1() -> Outcome {
    let layout = build_sim_geometry(&paper_scale().geometry, 6).map_err(|e| e.to_string())?;
    let n = layout.tunable_elements();
    let d = fraunhofer_distance(&layout.input());
    check(n == 1792, format!("{n} tunable elements"))?;
    check((18.5..=20.5).contains(&d), format!("Fraunhofer distance {d:.3} m"))?;
    Ok(format!("{n} tunable elements, Fraunhofer distance {d:.3} m"))
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for inst in 0..100u64 {
        let mut rng = stream_rng(2000 + inst, 0);
        use rand::Rng;
        let k = rng.random_range(4..=64usize);
        let rank = rng.random_range(1..k);
        let sigma2 = 10f64.powf(rng.random_range(-2.0..1.0));
        let b = random_cmat(k, rank, 3000 + inst);
        let r_h = &b * b.adjoint();
        let r = random_cmat(k, 1, 4000 + inst).column(0).into_owned();
        let cov = CovarianceModel::from_matrix(r_h.clone(), 1e-9).map_err(|e| e.to_string())?;
        let sub = reduce_subspace(&cov, None).map_err(|e| e.to_string())?;
        check(sub.rank() == rank, format!("instance {inst}: numerical rank {} != {rank}", sub.rank()))?;
        let closed = mmse_full(&r, &r_h, sigma2).map_err(|e| e.to_string())?.h_hat;
        let spectral = mmse_spectral_estimator(&cov, sigma2).map_err(|e| e.to_string())?.estimate(&r).map_err(|e| e.to_string())?;
        let reduced = mmse_reduced_estimator(&r_h, &sub, sigma2)
            .map_err(|e| e.to_string())?
            .estimate(&(sub.u.adjoint() * &r))
            .map_err(|e| e.to_string())?;
        worst = worst.max(rel(&spectral, &closed)).max(rel(&reduced, &closed));
    }
    check(worst <= 1e-10, format!("max relative difference {worst:.2e}"))?;
    Ok(format!("100 instances, max relative difference {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let cfg = desk_scale();
    let prep = prepare(&cfg, cfg.region.disk().map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    let l = prep.sub.rank();
    let mut lines = Vec::new();
    for snr in [0.0, 10.0] {
        let sigma2 = noise_variance_for_snr(&prep.cov.r_h, snr);
        let est = rsls_ideal_estimator(&prep.cov.r_h, &prep.sub, sigma2).map_err(|e| e.to_string())?;
        let obs = ObservationModel::new(ObservationMode::IdealProjection(prep.sub.u.adjoint()), sigma2).map_err(|e| e.to_string())?;
        let mc = monte_carlo_mse(&obs, &est, &ChannelSource::SubspaceGaussian(&prep.sub), 10_000, 31).map_err(|e| e.to_string())?;
        let target = sigma2 * l as f64;
        let dev = (mc.mse - target).abs() / target;
        check(dev <= 0.03, format!("{snr} dB: empirical {:.5} vs sigma^2 L {:.5} ({:.2}%)", mc.mse, target, 100.0 * dev))?;
        lines.push(format!("{snr} dB {:.2}%", 100.0 * dev));
    }
    Ok(format!("deviation from sigma^2 L at 1e4 trials: {}", lines.join(", ")))
}

fn criterion_4() -> Outcome {
    let (k, l) = (16, 4);
    let mut worst_ratio_slack = f64::INFINITY;
    let mut max_delta: f64 = 0.0;
    for draw in 0..1000u64 {
        let u = random_cmat(k, l, 50_000 + draw).qr().q().columns(0, l).into_owned();
        let raw = random_cmat(l, k, 60_000 + draw);
        let target = 0.3 * (draw as f64 + 0.5) / 1000.0;
        // δ_U = ‖ΔU‖₂ is homogeneous in Δ, so one rescale hits the target exactly.
        let du = nfsim::linalg::spectral_norm(&(&raw * &u));
        let delta = &raw * c64(target / du, 0.0);
        let v = u.adjoint() + delta;
        let m = mismatch_metrics(&v, &u).map_err(|e| e.to_string())?;
        check(m.delta_u <= 0.3 + 1e-12, format!("draw {draw}: delta_U {}", m.delta_u))?;
        max_delta = max_delta.max(m.delta_u);
        for lam in gram_eigenvalues(&v, &u) {
            check(
                lam >= m.eig_box.0 - 1e-12 && lam <= m.eig_box.1 + 1e-12,
                format!("draw {draw}: eigenvalue {lam} outside [{}, {}]", m.eig_box.0, m.eig_box.1),
            )?;
        }
        let vo = orthonormalize_rows(&v).map_err(|e| e.to_string())?;
        let rc = mse_ratio_check(&vo, &u, 1.0).map_err(|e| e.to_string())?;
        check(rc.applicable, format!("draw {draw}: orthonormality gap {}", rc.orthonormality_gap))?;
        check(rc.holds, format!("draw {draw}: ratio {} above bound {}", rc.actual_ratio, rc.bound))?;
        if rc.bound.is_finite() {
            worst_ratio_slack = worst_ratio_slack.min(rc.bound - rc.actual_ratio);
        }
    }
    Ok(format!("1000 draws up to delta_U {max_delta:.3}; eigenvalues in box; min bound slack {worst_ratio_slack:.2e}"))
}

fn desk_network() -> Result<(SimNetwork, CMat), String> {
    let cfg = desk_scale();
    let prep = prepare(&cfg, cfg.region.disk().map_err(|e| e.to_string())?, 5).map_err(|e| e.to_string())?;
    let net = SimNetwork::from_layout(&prep.layout, &cfg.impedance.provider().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok((net, prep.sub.u))
}

fn criterion_5() -> Outcome {
    let (net, u) = desk_network()?;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let eta = random_eta(net.ports.cells(), 900 + seed);
        for fit in [Fit::Subspace, Fit::Frobenius { weight: 1.0, scale: Scale::Concentrated }] {
            let g = evaluate(&net, &eta, &u, fit, true).map_err(|e| e.to_string())?.gradient.expect("gradient");
            let fd = finite_difference_gradient(&net, &eta, &u, fit, 1e-5).map_err(|e| e.to_string())?;
            let norm = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
                // Coordinates that vanish to rounding are compared against the gradient scale.
                let e = (a - b).abs() / b.abs().max(1e-6 * norm);
                check(e <= 1e-5, format!("eta seed {seed}, {fit:?}, coordinate {i}: relative error {e:.2e}"))?;
                worst = worst.max(e);
            }
        }
    }
    Ok(format!("10 random eta x 2 objectives on 48 cells, max relative error {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let cfg = desk_scale();
    let prep = prepare(&cfg, cfg.region.disk().map_err(|e| e.to_string())?, cfg.sweep.seed).map_err(|e| e.to_string())?;
    let opt = pipeline::optimizer_config(&cfg);
    let mut hits = 0;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let mut net = SimNetwork::from_layout(&prep.layout, &cfg.impedance.provider().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let trace = optimize(&mut net, &prep.sub.u, &nfsim::simopt::OptimizerConfig { rng_seed: Some(seed), ..opt.clone() })
            .map_err(|e| e.to_string())?;
        let ok = trace.converged && trace.final_delta_u <= DELTA_U_TARGET;
        hits += ok as usize;
        parts.push(format!("{:.3}", trace.final_delta_u));
    }
    check(hits >= 3, format!("{hits}/5 starts reached delta_U <= 0.1 ({})", parts.join(", ")))?;
    Ok(format!("{hits}/5 starts reached delta_U <= 0.1 (final: {})", parts.join(", ")))
}

fn desk_sweep() -> Result<SweepOutcome, String> {
    let mut cfg = desk_scale();
    cfg.sweep.sim = SimSource::Optimize;
    let opts = CellOptions { monte_carlo_trials: 0, localization_trials: 0, sim: SimSource::Optimize };
    run_cells(&cfg, &sweep_cells(&cfg), opts).map_err(|e| e.to_string())
}

type Key = (u64, u64, u64);

fn index(records: &[ResultRecord]) -> BTreeMap<(Key, String, String), f64> {
    records
        .iter()
        .filter(|r| r.provenance == Provenance::Analytic)
        .map(|r| {
            let key = (r.angle_deg.to_bits(), r.distance.to_bits(), r.snr_db.unwrap_or(f64::NAN).to_bits());
            ((key, r.estimator.clone(), r.metric.clone()), r.value)
        })
        .collect()
}

fn criterion_7(sweep: &SweepOutcome) -> Outcome {
    let idx = index(&sweep.records);
    let mut worst_mmse: f64 = 0.0;
    let mut worst_rsls: f64 = 0.0;
    for cell in &sweep.cells {
        let sim = cell.sim.as_ref().expect("SIM outcome");
        check(
            sim.delta_u <= DELTA_U_TARGET,
            format!("cell ({}, {:.0} deg): delta_U {:.4}", cell.distance, cell.angle.to_degrees(), sim.delta_u),
        )?;
        let bound = mse_ratio_bound(sim.delta_u);
        for snr in desk_scale().noise.snr_db {
            let key = (pipeline::degrees(cell.angle).to_bits(), cell.distance.to_bits(), snr.to_bits());
            let get = |est: &str, metric: &str| idx[&(key, est.to_string(), metric.to_string())];
            let mmse = get("mmse-sim", "mse") / get("mmse-ideal", "mse");
            let rsls = get("rsls-sim", "mse_subspace") / get("rsls-ideal", "mse_subspace");
            worst_mmse = worst_mmse.max(mmse);
            worst_rsls = worst_rsls.max(rsls);
            check(
                mmse <= RATIO_LIMIT && rsls <= RATIO_LIMIT && rsls <= bound + 1e-9,
                format!(
                    "cell ({}, {:.0} deg, {snr} dB): MMSE ratio {mmse:.4}, RS-LS ratio {rsls:.4}, bound {bound:.4}",
                    cell.distance,
                    cell.angle.to_degrees()
                ),
            )?;
        }
    }
    Ok(format!(
        "{} cells at delta_U <= 0.1; max MMSE ratio {worst_mmse:.4}, max RS-LS ratio {worst_rsls:.4} (limit {RATIO_LIMIT})",
        sweep.cells.len()
    ))
}

fn criterion_8() -> Outcome {
    let geom = build_sim_geometry(&desk_scale().geometry, 4).map_err(|e| e.to_string())?.input();
    let k = geom.len() as f64;
    let eps = ChannelParams { x: 1.0, y: 0.2, gain: 0.8, phase: 0.4 };
    let j = channel_jacobian(&geom, &eps).map_err(|e| e.to_string())?;
    let h = |e: [f64; 4]| channel_at(&geom, Point2::new(e[0], e[1]), e[2], e[3]);
    let steps = [1e-6, 1e-6, 1e-7, 1e-7];
    let mut worst_j: f64 = 0.0;
    for c in 0..4 {
        let (mut p, mut m) = (eps.as_array(), eps.as_array());
        p[c] += steps[c];
        m[c] -= steps[c];
        let fd = (h(p) - h(m)) / c64(2.0 * steps[c], 0.0);
        let col = j.column(c).into_owned();
        worst_j = worst_j.max((fd - &col).norm() / col.norm());
    }
    check(worst_j <= 1e-6, format!("Jacobian relative error {worst_j:.2e}"))?;
    let s2 = 0.05;
    let a = fim_peb(&geom, &eps, s2).map_err(|e| e.to_string())?;
    let b = fim_peb(&geom, &eps, 4.0 * s2).map_err(|e| e.to_string())?;
    let lin = (b.peb / a.peb - 2.0).abs() / 2.0;
    check(lin < 1e-8, format!("PEB scaling error {lin:.2e}"))?;
    let expected = k * eps.gain * eps.gain / s2;
    check(a.fim[(3, 3)] == expected, format!("FIM theta-theta {} vs {}", a.fim[(3, 3)], expected))?;
    Ok(format!("Jacobian error {worst_j:.2e}, PEB scaling error {lin:.2e}, FIM theta-theta exact ({expected})"))
}

fn criterion_9(sweep: &SweepOutcome) -> Outcome {
    let idx = index(&sweep.records);
    let l = desk_scale().reduction.rank as f64;
    let cfg = desk_scale();
    let mut material_cells = 0;
    let mut total = 0;
    let mut min_gap_high: f64 = f64::INFINITY;
    let mut max_gap_low: f64 = 0.0;
    for angle in cfg.angles() {
        for &snr in &cfg.noise.snr_db {
            let mut prefix_open = true;
            for &d in &cfg.sweep.distances {
                let key = (pipeline::degrees(angle).to_bits(), d.to_bits(), snr.to_bits());
                let get = |est: &str, metric: &str| idx[&(key, est.to_string(), metric.to_string())];
                let at = format!("({d}, {:.0} deg, {snr} dB)", angle.to_degrees());
                for (m, r) in [("mmse-ideal", "rsls-ideal"), ("mmse-sim", "rsls-sim")] {
                    check(get(m, "mse") <= get(r, "mse") + 1e-9, format!("{at}: {m} {} > {r} {}", get(m, "mse"), get(r, "mse")))?;
                }
                let gap = 1.0 - get("digital-baseline", "mse") / get("mmse-ideal", "mse");
                let material = gap > BASELINE_MARGIN;
                let high_rank = get("channel", "effective_rank") > l;
                check(material == high_rank, format!("{at}: baseline advantage {gap:.3} with effective rank {}", get("channel", "effective_rank")))?;
                check(!material || prefix_open, format!("{at}: baseline advantage {gap:.3} beyond a shorter distance without one"))?;
                prefix_open &= material;
                if material {
                    material_cells += 1;
                    min_gap_high = min_gap_high.min(gap);
                } else {
                    max_gap_low = max_gap_low.max(gap);
                }
                total += 1;
            }
        }
    }
    check(material_cells > 0, "baseline never better")?;
    Ok(format!(
        "MMSE <= RS-LS on all {total} cells; baseline better (> {:.0}%) on {material_cells} shortest-distance cells, all with effective rank > L (min advantage {min_gap_high:.3}, max elsewhere {max_gap_low:.3})",
        100.0 * BASELINE_MARGIN
    ))
}

fn criterion_10() -> Outcome {
    let cfg = desk_scale();
    let geom = build_sim_geometry(&cfg.geometry, 4).map_err(|e| e.to_string())?.input();
    let region = UniformDisk::new(Point2::new(1.0, 0.0), 0.6).map_err(|e| e.to_string())?;
    let loc = LocalizerConfig::default();
    let pts = coarse_points(&region, &loc);
    for idx in [0, pts.len() / 3, pts.len() / 2, pts.len() - 1] {
        let p = pts[idx];
        let est = localize(&channel_at(&geom, p, 0.9, 1.3), &geom, &region, &loc).map_err(|e| e.to_string())?;
        check(est.position == p && (est.score - 1.0).abs() < 1e-12, format!("on-grid point {idx} not recovered"))?;
    }
    let p = Point2::new(1.05, 0.08);
    // The PEB must sit well inside the 0.3 m region radius; otherwise the prior
    // truncates the error and the bound no longer applies.
    let (gain, sigma_n2) = (1.0, 1e-5);
    let bound = fim_peb(&geom, &ChannelParams { x: p.x, y: p.y, gain, phase: 0.7 }, sigma_n2).map_err(|e| e.to_string())?.peb;
    let trials = localization_trials(&geom, &region, p, gain, 0.7, sigma_n2, 1000, 77, &loc).map_err(|e| e.to_string())?;
    let (r, mse_se) = rmse(&trials);
    // One-sided test of H0: RMSE >= PEB on the mean squared error.
    let z = (r * r - bound * bound) / mse_se;
    check(z > -2.326, format!("RMSE {r:.3e} below PEB {bound:.3e} (z = {z:.2})"))?;
    Ok(format!("on-grid recovery exact; RMSE {r:.3e} m vs PEB {bound:.3e} m over 1000 trials (z = {z:.2})"))
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Outcome, extra: Duration) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let elapsed = t.elapsed() + extra;
    let res = res.and_then(|msg| {
        if elapsed <= budget {
            Ok(msg)
        } else {
            Err(format!("{msg}; runtime {:.1}s over budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()))
        }
    });
    match &res {
        Ok(msg) => println!("PASS criterion {name} [{:.1}s]: {msg}", elapsed.as_secs_f64()),
        Err(msg) => println!("FAIL criterion {name} [{:.1}s]: {msg}", elapsed.as_secs_f64()),
    }
    res.is_ok()
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run("1 (geometry scalars)", secs(1), criterion_1, Duration::ZERO);
    ok &= run("2 (estimator form equivalence)", secs(30), criterion_2, Duration::ZERO);
    ok &= run("3 (RS-LS ideal MSE)", secs(60), criterion_3, Duration::ZERO);
    ok &= run("4 (perturbation bounds)", secs(60), criterion_4, Duration::ZERO);
    ok &= run("5 (gradient correctness)", secs(300), criterion_5, Duration::ZERO);
    ok &= run("6 (SIM optimization target)", secs(900), criterion_6, Duration::ZERO);

    // Criteria 7 and 9 share one desk-scale sweep; its cost counts toward both.
    let t = Instant::now();
    let sweep = catch_unwind(desk_sweep).unwrap_or_else(|_| Err("sweep panicked".into()));
    let sweep_time = t.elapsed();
    match &sweep {
        Ok(s) => {
            ok &= run("7 (near-indistinguishability)", secs(300), || criterion_7(s), sweep_time);
        }
        Err(e) => {
            println!("FAIL criterion 7 (near-indistinguishability): sweep failed: {e}");
            ok = false;
        }
    }
    ok &= run("8 (FIM/PEB correctness)", secs(30), criterion_8, Duration::ZERO);
    match &sweep {
        Ok(s) => {
            ok &= run("9 (ordering properties)", secs(600), || criterion_9(s), sweep_time);
        }
        Err(e) => {
            println!("FAIL criterion 9 (ordering properties): sweep failed: {e}");
            ok = false;
        }
    }
    ok &= run("10 (localizer consistency)", secs(600), criterion_10, Duration::ZERO);
    if !ok {
        std::process::exit(1);
    }
}
