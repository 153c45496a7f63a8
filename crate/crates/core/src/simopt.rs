//! Configure the metasurface phases so that `V(η)` approximates `U^H`.
//!
//! The fitted objective is `E_w(η) = tr(R W R^H)` with residual
//! `R = c V(η) − U^H` and weight `W = U U^H + w (I − U U^H)`. At `w = 1` this
//! is the plain Frobenius mismatch `‖c V − U^H‖_F²`. Lowering `w` shifts the
//! effort towards the in-subspace block `V U`, which is what the effective
//! mismatch `δ_U` measures; the optimizer lowers `w` only when descent at the
//! current weight has stalled. The complex scale `c` is concentrated out in
//! closed form (or fixed to one).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::bounds::mismatch_metrics;
use crate::error::{Error, Result};
use crate::linalg::{c64, hermitian_eigen, hpd_inverse, CMat, CVec, C64};
use crate::multiport::{load_reactance_derivative, wrap_phase, SimNetwork};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// Step multiplier on each backtracking rejection.
    pub backtrack: f64,
    pub max_halvings: usize,
    /// Step multiplier after an accepted step under the fixed rule (1 keeps the step fixed).
    pub step_growth: f64,
    pub step_rule: StepRule,
    /// Set from the scenario's reduction block by the harness.
    #[serde(skip)]
    pub target_delta_u: f64,
    /// Compare against finite differences every this many iterations (0 disables).
    pub gradient_check_period: usize,
    /// Seed for the uniform initialization; `None` starts from the network's current phases.
    pub rng_seed: Option<u64>,
    pub fit_mode: FitMode,
    /// Concentrate a global complex scale out of the Frobenius objective.
    pub concentrate_scale: bool,
    /// Smallest out-of-subspace weight reached by continuation (1 disables it).
    pub min_weight: f64,
    /// Relative objective decrease over `stall_window` iterations counted as a stall.
    pub stall_tolerance: f64,
    pub stall_window: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 20_000,
            step_size: 1e-2,
            backtrack: 0.5,
            max_halvings: 20,
            step_growth: 1.5,
            step_rule: StepRule::BarzilaiBorwein,
            target_delta_u: 0.1,
            gradient_check_period: 0,
            rng_seed: Some(0),
            fit_mode: FitMode::Subspace,
            concentrate_scale: true,
            min_weight: 1e-3,
            stall_tolerance: 1e-4,
            stall_window: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("optimizer.step_size", "must be positive"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::config("optimizer.backtrack", "must lie in (0, 1)"));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return Err(Error::config("optimizer.step_growth", "must be at least 1"));
        }
        if !(self.target_delta_u >= 0.0) {
            return Err(Error::config("optimizer.target_delta_u", "must be nonnegative"));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= 1.0) {
            return Err(Error::config("optimizer.min_weight", "must lie in (0, 1]"));
        }
        if !(self.stall_tolerance >= 0.0) {
            return Err(Error::config("optimizer.stall_tolerance", "must be nonnegative"));
        }
        if self.stall_window == 0 {
            return Err(Error::config("optimizer.stall_window", "must be at least 1"));
        }
        Ok(())
    }
}

/// How the initial trial step of each iteration is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Previous accepted step times `step_growth`.
    Fixed,
    /// Alternating Barzilai–Borwein steps from the last two iterates.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    /// Use `V` as is.
    Unit,
    /// Least-squares optimal complex scale for the objective.
    Concentrated,
    Fixed(C64),
}

/// Fitted criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fit {
    /// `tr(R W R^H)`, `R = c V − U^H`, `W = U U^H + weight (I − U U^H)`.
    Frobenius { weight: f64, scale: Scale },
    /// `L − tr((V V^H)⁻¹ V U U^H V^H)`: the sum of squared sines of the
    /// principal angles between the row space of `V` and the target subspace.
    Subspace,
}

/// How the realized projection is formed from `V` on the receiver side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Frobenius fit with a concentrated complex scale and weight continuation.
    Frobenius,
    /// Subspace fit; the L receiver chains apply the aligning combiner of
    /// [`energy_combiner`], so the realized projection has orthonormal rows.
    Subspace,
}

/// Objective value, optional gradient and the quantities behind them.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    /// Unscaled `V(η)`.
    pub v: CMat,
    pub scale: C64,
}

impl Evaluation {
    pub fn scaled_v(&self) -> CMat {
        &self.v * self.scale
    }
}

fn check_target(net: &SimNetwork, u: &CMat) -> Result<()> {
    if u.nrows() != net.inputs() {
        return Err(Error::dimension("target rows", net.inputs(), u.nrows()));
    }
    if u.ncols() != net.outputs() {
        return Err(Error::dimension("target rank vs receivers", net.outputs(), u.ncols()));
    }
    Ok(())
}

/// Objective at `eta`; `u` is the K×L basis whose adjoint is the target.
pub fn evaluate(net: &SimNetwork, eta: &[f64], u: &CMat, fit: Fit, with_gradient: bool) -> Result<Evaluation> {
    check_target(net, u)?;
    let t = net.transfer_at(eta)?;
    let n = net.ports.ports();
    let p = t.solve_columns(&net.input_ports, n);
    let v = &net.c_out * &p;
    let uh = u.adjoint();
    // Every objective is written so that dE = 2 Re tr(dV N).
    let (value, n_mat, c) = match fit {
        Fit::Frobenius { weight, scale } => {
            let k = u.nrows();
            let w = u * &uh * c64(1.0 - weight, 0.0) + CMat::identity(k, k).scale(weight);
            let c = match scale {
                Scale::Unit => c64(1.0, 0.0),
                Scale::Fixed(c) => c,
                Scale::Concentrated => {
                    let den = (&v * &w * v.adjoint()).trace().re;
                    if den > 0.0 {
                        (&uh * &w * v.adjoint()).trace() / den
                    } else {
                        c64(1.0, 0.0)
                    }
                }
            };
            let r = &v * c - &uh;
            let rw = &r * &w;
            let value = (&rw * r.adjoint()).trace().re;
            (value, rw.adjoint() * c, c)
        }
        Fit::Subspace => {
            let gi = hpd_inverse(&(&v * v.adjoint()), "V V^H")?;
            let vu = &v * u;
            let h = &vu * vu.adjoint();
            let value = (u.ncols() as f64 - (&gi * &h).trace().re).max(0.0);
            let n_mat = v.adjoint() * &gi * &h * &gi - u * (vu.adjoint() * &gi);
            (value, n_mat, c64(1.0, 0.0))
        }
    };
    let gradient = if with_gradient {
        // dV = −C T dZ T E with dZ diagonal, j X'(η) on both ports of a cell,
        // so dE/dη = −2 Re{ j X' Σ_ports [T E N C T]_pp }.
        let qt = t.solve(&net.c_out.transpose());
        let m = &p * &n_mat;
        let mut g = vec![0.0; eta.len()];
        for (cell, gc) in g.iter_mut().enumerate() {
            let dx = load_reactance_derivative(net.x0, eta[cell]);
            let mut acc = c64(0.0, 0.0);
            for port in [2 * cell, 2 * cell + 1] {
                for l in 0..m.ncols() {
                    acc += m[(port, l)] * qt[(port, l)];
                }
            }
            *gc = -2.0 * (c64(0.0, dx) * acc).re;
        }
        Some(g)
    } else {
        None
    };
    Ok(Evaluation { value, gradient, v, scale: c })
}

/// `‖c V(η) − U^H‖_F²` at the network's current phases.
pub fn objective(net: &SimNetwork, u: &CMat, scale: Scale) -> Result<f64> {
    Ok(evaluate(net, &net.eta, u, Fit::Frobenius { weight: 1.0, scale }, false)?.value)
}

/// Analytic gradient of [`objective`] with respect to the KQ phases.
pub fn gradient(net: &SimNetwork, u: &CMat, scale: Scale) -> Result<Vec<f64>> {
    Ok(evaluate(net, &net.eta, u, Fit::Frobenius { weight: 1.0, scale }, true)?.gradient.expect("requested"))
}

/// L×L combiner `B = Q (V V^H)^{-1/2}` with `Q` the unitary polar factor that
/// makes `B V U` Hermitian positive semidefinite. `B V` has orthonormal rows and
/// its mismatch `δ_U` equals one minus the smallest principal-angle cosine.
pub fn energy_combiner(v: &CMat, u: &CMat) -> Result<CMat> {
    let g = v * v.adjoint();
    let eig = hermitian_eigen(&g);
    let top = eig.values.first().copied().unwrap_or(0.0);
    if !(eig.values.iter().all(|&l| l > 1e-14 * top) && top > 0.0) {
        return Err(Error::Numerical("projection V has linearly dependent rows".into()));
    }
    let d = CVec::from_iterator(eig.values.len(), eig.values.iter().map(|&l| c64(1.0 / l.sqrt(), 0.0)));
    let g_isqrt = &eig.vectors * CMat::from_diagonal(&d) * eig.vectors.adjoint();
    let s = &g_isqrt * v * u;
    let svd = s.svd(true, true);
    let (w, zh) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let q = zh.adjoint() * w.adjoint();
    Ok(q * g_isqrt)
}

/// Projection handed to the estimators for a given fit mode.
pub fn realized_projection(v: &CMat, u: &CMat, mode: FitMode) -> Result<CMat> {
    match mode {
        FitMode::Subspace => Ok(energy_combiner(v, u)? * v),
        FitMode::Frobenius => {
            let ev = concentrated_scale(v, u);
            Ok(v * ev)
        }
    }
}

/// Least-squares complex scale `argmin_c ‖c V − U^H‖_F`.
pub fn concentrated_scale(v: &CMat, u: &CMat) -> C64 {
    let den = v.norm_squared();
    if den > 0.0 {
        (u.adjoint() * v.adjoint()).trace() / den
    } else {
        c64(1.0, 0.0)
    }
}

/// Central finite-difference gradient (for checks).
pub fn finite_difference_gradient(net: &SimNetwork, eta: &[f64], u: &CMat, fit: Fit, step: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(eta.len());
    let mut e = eta.to_vec();
    for i in 0..eta.len() {
        e[i] = eta[i] + step;
        let fp = evaluate(net, &e, u, fit, false)?.value;
        e[i] = eta[i] - step;
        let fm = evaluate(net, &e, u, fit, false)?.value;
        e[i] = eta[i];
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Largest per-coordinate relative gradient error, with an absolute floor
/// relative to the gradient norm for near-zero coordinates.
pub fn gradient_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-6 * norm).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub delta_u: f64,
    pub delta_rel: f64,
    pub step: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub final_eta: Vec<f64>,
    pub converged: bool,
    /// L×L receiver-side combiner applied to `V` when reporting the deltas.
    #[serde(skip)]
    pub combiner: CMat,
    pub final_delta_u: f64,
    pub final_delta_rel: f64,
    /// `(iteration, max relative error)` for each periodic gradient check.
    pub gradient_checks: Vec<(usize, f64)>,
}

impl OptimizationTrace {
    pub fn iterations(&self) -> usize {
        self.rows.last().map(|r| r.iteration).unwrap_or(0)
    }

    /// Final plain Frobenius objective (w = 1) is not tracked; this is the
    /// last value of the weighted objective.
    pub fn final_objective(&self) -> f64 {
        self.rows.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }

    /// CSV with columns `iteration,objective,delta_u,delta_rel,step,weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Numerical(format!("trace CSV: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("trace", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Uniform phases in `(−π, π]` from `seed`.
pub fn random_eta(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    (0..n).map(|_| wrap_phase(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))).collect()
}

fn deltas(ev: &Evaluation, u: &CMat, mode: FitMode) -> Result<(f64, f64)> {
    let realized = match mode {
        FitMode::Frobenius => ev.scaled_v(),
        FitMode::Subspace => energy_combiner(&ev.v, u)? * &ev.v,
    };
    let m = mismatch_metrics(&realized, u)?;
    Ok((m.delta_u, m.delta_rel))
}

fn check_finite(value: f64, iteration: usize) -> Result<()> {
    if value.is_nan() {
        return Err(Error::Optimization(format!("objective is NaN at iteration {iteration}")));
    }
    Ok(())
}

/// Gradient descent with Armijo backtracking and weight continuation.
///
/// Stops when `δ_U ≤ target_delta_u` (converged) or when the iteration budget
/// is exhausted or descent stalls at the smallest weight (not converged). The
/// final phases are stored in `net`.
pub fn optimize(net: &mut SimNetwork, u: &CMat, cfg: &OptimizerConfig) -> Result<OptimizationTrace> {
    cfg.validate()?;
    check_target(net, u)?;
    if let Some(seed) = cfg.rng_seed {
        let eta = random_eta(net.ports.cells(), seed);
        net.set_eta(&eta)?;
    }
    let scale = if cfg.concentrate_scale { Scale::Concentrated } else { Scale::Unit };
    let fit = |weight: f64| match cfg.fit_mode {
        FitMode::Frobenius => Fit::Frobenius { weight, scale },
        FitMode::Subspace => Fit::Subspace,
    };
    // Continuation only applies to the Frobenius fit.
    let min_weight = match cfg.fit_mode {
        FitMode::Frobenius => cfg.min_weight,
        FitMode::Subspace => 1.0,
    };
    let mut eta = net.eta.clone();
    let mut weight = 1.0;
    let mut ev = evaluate(net, &eta, u, fit(weight), true)?;
    check_finite(ev.value, 0)?;
    let (mut du, mut dr) = deltas(&ev, u, cfg.fit_mode)?;
    let mut rows = vec![TraceRow {
        iteration: 0,
        objective: ev.value,
        delta_u: du,
        delta_rel: dr,
        step: 0.0,
        weight,
    }];
    let mut checks = Vec::new();
    let mut step = cfg.step_size;
    let mut window_start = ev.value;
    let mut since_window = 0usize;
    let mut converged = du <= cfg.target_delta_u;
    let mut iter = 0usize;

    while !converged && iter < cfg.max_iters {
        iter += 1;
        let g = ev.gradient.clone().expect("gradient requested");
        if cfg.gradient_check_period > 0 && iter % cfg.gradient_check_period == 0 {
            let fd = finite_difference_gradient(net, &eta, u, fit(weight), 1e-6)?;
            let err = gradient_relative_error(&g, &fd);
            if err > 1e-4 {
                warn!(iteration = iter, error = err, "gradient check mismatch");
            }
            checks.push((iter, err));
        }
        let gn2: f64 = g.iter().map(|x| x * x).sum();
        let mut accepted = None;
        if gn2 > 0.0 {
            let mut alpha = step;
            for _ in 0..=cfg.max_halvings {
                let trial: Vec<f64> = eta.iter().zip(&g).map(|(e, gi)| wrap_phase(e - alpha * gi)).collect();
                // A conditioning failure at the trial point counts as a rejected step.
                if let Ok(tv) = evaluate(net, &trial, u, fit(weight), true) {
                    check_finite(tv.value, iter)?;
                    if tv.value <= ev.value - 1e-4 * alpha * gn2 {
                        accepted = Some((trial, tv, alpha));
                        break;
                    }
                }
                alpha *= cfg.backtrack;
            }
        }
        let stalled = match accepted {
            Some((trial, tv, alpha)) => {
                let g_new = tv.gradient.as_ref().expect("gradient requested");
                step = match cfg.step_rule {
                    StepRule::Fixed => alpha * cfg.step_growth,
                    StepRule::BarzilaiBorwein => {
                        // s = −α g (before wrapping), y = g_new − g.
                        let (mut ss, mut sy, mut yy) = (0.0, 0.0, 0.0);
                        for (go, gn) in g.iter().zip(g_new) {
                            let si = -alpha * go;
                            let yi = gn - go;
                            ss += si * si;
                            sy += si * yi;
                            yy += yi * yi;
                        }
                        let bb = if iter % 2 == 0 { ss / sy } else { sy / yy };
                        if sy > 0.0 && bb.is_finite() {
                            bb.clamp(1e-10, 1e6)
                        } else {
                            alpha * cfg.step_growth
                        }
                    }
                };
                eta = trial;
                ev = tv;
                (du, dr) = deltas(&ev, u, cfg.fit_mode)?;
                rows.push(TraceRow {
                    iteration: iter,
                    objective: ev.value,
                    delta_u: du,
                    delta_rel: dr,
                    step: alpha,
                    weight,
                });
                converged = du <= cfg.target_delta_u;
                since_window += 1;
                if since_window >= cfg.stall_window {
                    let progress = (window_start - ev.value) / window_start.abs().max(f64::MIN_POSITIVE);
                    window_start = ev.value;
                    since_window = 0;
                    progress < cfg.stall_tolerance
                } else {
                    false
                }
            }
            None => {
                step = cfg.step_size;
                true
            }
        };
        if stalled && !converged {
            if weight <= min_weight {
                debug!(iteration = iter, delta_u = du, "descent stalled");
                break;
            }
            weight = (weight * 0.5).max(min_weight);
            ev = evaluate(net, &eta, u, fit(weight), true)?;
            check_finite(ev.value, iter)?;
            (du, dr) = deltas(&ev, u, cfg.fit_mode)?;
            converged = du <= cfg.target_delta_u;
            window_start = ev.value;
            since_window = 0;
            rows.push(TraceRow {
                iteration: iter,
                objective: ev.value,
                delta_u: du,
                delta_rel: dr,
                step: 0.0,
                weight,
            });
        }
    }
    net.set_eta(&eta)?;
    debug!(iterations = iter, delta_u = du, converged, "optimization finished");
    let l = u.ncols();
    let combiner = match cfg.fit_mode {
        FitMode::Frobenius => CMat::identity(l, l) * ev.scale,
        FitMode::Subspace => energy_combiner(&ev.v, u)?,
    };
    Ok(OptimizationTrace {
        rows,
        final_eta: net.eta.clone(),
        converged,
        combiner,
        final_delta_u: du,
        final_delta_rel: dr,
        gradient_checks: checks,
    })
}

/// Run seeded starts in order until one converges; otherwise keep the lowest
/// `δ_U`. The winning phases are stored in `net`.
pub fn optimize_multistart(net: &mut SimNetwork, u: &CMat, cfg: &OptimizerConfig, seeds: &[u64]) -> Result<OptimizationTrace> {
    if seeds.is_empty() {
        return Err(Error::config("optimizer.starts", "at least one start is required"));
    }
    let mut best: Option<OptimizationTrace> = None;
    for &seed in seeds {
        let mut local = net.clone();
        let run = optimize(&mut local, u, &OptimizerConfig { rng_seed: Some(seed), ..cfg.clone() })?;
        let better = match &best {
            None => true,
            Some(b) => (run.converged && !b.converged) || (run.converged == b.converged && run.final_delta_u < b.final_delta_u),
        };
        if better {
            best = Some(run);
        }
        if best.as_ref().is_some_and(|b| b.converged) {
            break;
        }
    }
    let best = best.expect("nonempty");
    net.set_eta(&best.final_eta)?;
    Ok(best)
}
