//! Grid-search position estimation from an estimated channel.
//!
//! With `h = G e^{jθ} a(p)` and `‖a(p)‖² = K` for every `p`, the gain and phase
//! concentrate out of the least-squares fit, leaving the maximization of
//! `|a(p)^H ĥ|²` over the prior region.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::steering_entries;
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, Point2, PositionPrior};
use crate::linalg::CVec;
use crate::rng::{complex_normal_vec, stream_rng};

/// Cap on local-grid moves, a guard against slow drifts on flat ridges.
const MAX_REFINE_MOVES: usize = 200;
const POLISH_MAX_ITERS: u64 = 400;
const POLISH_SD_TOLERANCE: f64 = 1e-15;
const POLISH_RESTARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    /// Points per axis over the region's bounding box.
    pub coarse_grid: usize,
    /// Number of times the local grid shrinks.
    pub refine_iters: usize,
    pub refine_shrink: f64,
    /// Points per axis of each local refinement grid (odd).
    pub refine_grid: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            coarse_grid: 64,
            refine_iters: 6,
            refine_shrink: 0.5,
            refine_grid: 5,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_grid < 2 {
            return Err(Error::config("localizer.coarse_grid", "need at least 2 points per axis"));
        }
        if !(self.refine_shrink > 0.0 && self.refine_shrink < 1.0) {
            return Err(Error::config("localizer.refine_shrink", "must lie in (0, 1)"));
        }
        if self.refine_grid < 3 || self.refine_grid % 2 == 0 {
            return Err(Error::config("localizer.refine_grid", "must be odd and at least 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Localization {
    pub position: Point2,
    /// `|a^H ĥ|² / (K ‖ĥ‖²)`, in `[0, 1]`.
    pub score: f64,
}

/// Normalized correlation between `ĥ` and the steering vector at `p`.
pub fn correlation_score(geometry: &ArrayGeometry, h_hat: &CVec, h_norm2: f64, p: Point2) -> f64 {
    let a = steering_entries(geometry, p);
    a.dotc(h_hat).norm_sqr() / (geometry.len() as f64 * h_norm2)
}

fn best_of(geometry: &ArrayGeometry, h_hat: &CVec, h_norm2: f64, points: &[Point2]) -> Option<Localization> {
    // Scores are computed in parallel; the reduction runs in index order so ties
    // resolve to the first point.
    let scores: Vec<f64> = points.par_iter().map(|&p| correlation_score(geometry, h_hat, h_norm2, p)).collect();
    let mut best: Option<Localization> = None;
    for (p, s) in points.iter().zip(scores) {
        if best.map_or(true, |b| s > b.score) {
            best = Some(Localization { position: *p, score: s });
        }
    }
    best
}

/// Coarse grid over the region's bounding box, a moving local grid, then a simplex polish.
pub fn localize(h_hat: &CVec, geometry: &ArrayGeometry, region: &dyn PositionPrior, cfg: &LocalizerConfig) -> Result<Localization> {
    cfg.validate()?;
    if h_hat.len() != geometry.len() {
        return Err(Error::dimension("estimated channel", geometry.len(), h_hat.len()));
    }
    let h_norm2 = h_hat.norm_squared();
    if !(h_norm2 > 0.0) || !h_norm2.is_finite() {
        return Err(Error::UndefinedEstimate("estimated channel is zero or non-finite".into()));
    }
    let (lo, hi) = region.bounds();
    let n = cfg.coarse_grid;
    let sx = (hi.x - lo.x) / (n - 1) as f64;
    let sy = (hi.y - lo.y) / (n - 1) as f64;
    let coarse = coarse_points(region, cfg);
    let mut best = best_of(geometry, h_hat, h_norm2, &coarse)
        .ok_or_else(|| Error::UndefinedEstimate("no grid point falls inside the region".into()))?;

    // Pattern search: the local grid follows the best point at a fixed size and
    // shrinks only when its center stays best. The likelihood is a narrow ridge
    // along range, so the best coarse point can lie several cells from the peak.
    let half = (cfg.refine_grid / 2) as f64;
    let (mut hx, mut hy) = (sx, sy);
    let mut shrinks = 0;
    let mut moves = 0;
    while shrinks < cfg.refine_iters && moves < MAX_REFINE_MOVES {
        let c = best.position;
        let mut local = Vec::with_capacity(cfg.refine_grid * cfg.refine_grid);
        for i in 0..cfg.refine_grid {
            for j in 0..cfg.refine_grid {
                let p = Point2::new(c.x + hx * (i as f64 - half) / half, c.y + hy * (j as f64 - half) / half);
                if region.contains(p) {
                    local.push(p);
                }
            }
        }
        match best_of(geometry, h_hat, h_norm2, &local) {
            Some(b) if b.score > best.score => {
                best = b;
                moves += 1;
            }
            _ => {
                hx *= cfg.refine_shrink;
                hy *= cfg.refine_shrink;
                shrinks += 1;
            }
        }
    }
    // Axis-aligned stencils stall short of the peak on the oblique crest. A
    // simplex in range/arc coordinates finishes the climb, restarted while it
    // still improves.
    for _ in 0..POLISH_RESTARTS {
        match polish(geometry, h_hat, h_norm2, region, best.position, sx.max(sy) * 0.5) {
            Some(p) if p.score > best.score => best = p,
            _ => break,
        }
    }
    Ok(best)
}

/// Polish coordinates: range from the array origin and arc length at the
/// starting range. The likelihood crest runs along range, so it lies close to
/// an axis here.
#[derive(Clone, Copy)]
struct Polar {
    r0: f64,
}

impl Polar {
    fn to_point(self, x: &[f64]) -> Point2 {
        let phi = x[1] / self.r0;
        Point2::new(x[0] * phi.cos(), x[0] * phi.sin())
    }
}

struct NegScore<'a> {
    geometry: &'a ArrayGeometry,
    h_hat: &'a CVec,
    h_norm2: f64,
    region: &'a dyn PositionPrior,
    polar: Polar,
}

impl CostFunction for NegScore<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let p = self.polar.to_point(x);
        // Scores lie in [0, 1], so 1 is worse than any point inside.
        if x[0] <= 0.0 || !self.region.contains(p) {
            return Ok(1.0);
        }
        Ok(-correlation_score(self.geometry, self.h_hat, self.h_norm2, p))
    }
}

fn polish(geometry: &ArrayGeometry, h_hat: &CVec, h_norm2: f64, region: &dyn PositionPrior, start: Point2, size: f64) -> Option<Localization> {
    let r0 = start.x.hypot(start.y);
    if !(r0 > 0.0) {
        return None;
    }
    let polar = Polar { r0 };
    let s0 = r0 * start.y.atan2(start.x);
    let simplex = vec![vec![r0, s0], vec![r0 + size, s0], vec![r0, s0 + size]];
    let solver = NelderMead::new(simplex).with_sd_tolerance(POLISH_SD_TOLERANCE).ok()?;
    let problem = NegScore { geometry, h_hat, h_norm2, region, polar };
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(POLISH_MAX_ITERS))
        .run()
        .ok()?;
    let x = res.state.best_param?;
    // Mapping back to Cartesian could perturb an unmoved start by an ulp.
    if x[..] == [r0, s0] {
        return None;
    }
    let p = polar.to_point(&x);
    region.contains(p).then(|| Localization { position: p, score: correlation_score(geometry, h_hat, h_norm2, p) })
}

/// The coarse search points (inside the region only).
pub fn coarse_points(region: &dyn PositionPrior, cfg: &LocalizerConfig) -> Vec<Point2> {
    grid_points(region, cfg.coarse_grid)
}

/// `n × n` grid over the bounding box, restricted to the region.
pub fn grid_points(region: &dyn PositionPrior, n: usize) -> Vec<Point2> {
    let (lo, hi) = region.bounds();
    let step = |a: f64, b: f64, i: usize| if n > 1 { a + (b - a) * i as f64 / (n - 1) as f64 } else { 0.5 * (a + b) };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let p = Point2::new(step(lo.x, hi.x, i), step(lo.y, hi.y, j));
            if region.contains(p) {
                out.push(p);
            }
        }
    }
    out
}

/// Brute-force maximization over an `n × n` grid (reference implementation).
pub fn exhaustive_search(h_hat: &CVec, geometry: &ArrayGeometry, region: &dyn PositionPrior, n: usize) -> Result<Localization> {
    let h_norm2 = h_hat.norm_squared();
    if !(h_norm2 > 0.0) {
        return Err(Error::UndefinedEstimate("estimated channel is zero".into()));
    }
    best_of(geometry, h_hat, h_norm2, &grid_points(region, n))
        .ok_or_else(|| Error::UndefinedEstimate("no grid point falls inside the region".into()))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LocalizationTrial {
    pub trial: usize,
    pub true_x: f64,
    pub true_y: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub error_m: f64,
    pub score: f64,
}

/// Localize `G e^{jθ} a(p) + n` repeatedly, `n` white with per-real-component variance `σ_n²`.
#[allow(clippy::too_many_arguments)]
pub fn localization_trials(
    geometry: &ArrayGeometry,
    region: &dyn PositionPrior,
    p_true: Point2,
    gain: f64,
    phase: f64,
    sigma_n2: f64,
    trials: usize,
    rng_seed: u64,
    cfg: &LocalizerConfig,
) -> Result<Vec<LocalizationTrial>> {
    let h = crate::channel::channel_at(geometry, p_true, gain, phase);
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(rng_seed, t as u64);
            let n = complex_normal_vec(&mut rng, h.len(), 2.0 * sigma_n2);
            let loc = localize(&(&h + n), geometry, region, cfg)?;
            Ok(LocalizationTrial {
                trial: t,
                true_x: p_true.x,
                true_y: p_true.y,
                est_x: loc.position.x,
                est_y: loc.position.y,
                error_m: loc.position.distance(&p_true),
                score: loc.score,
            })
        })
        .collect()
}

/// Root mean squared error and the standard error of the mean squared error.
pub fn rmse(trials: &[LocalizationTrial]) -> (f64, f64) {
    let sq: Vec<f64> = trials.iter().map(|t| t.error_m * t.error_m).collect();
    let s = crate::estimation::summarize(&sq);
    (s.mse.sqrt(), s.stderr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::channel_at;
    use crate::geometry::UniformDisk;
    use crate::linalg::c64;

    fn line() -> ArrayGeometry {
        ArrayGeometry::planar_stack(16, 1, 1, 0.00535, 0.00535, 0.0107, 0.0)
    }

    #[test]
    fn noiseless_on_grid_recovery() {
        let g = line();
        let region = UniformDisk::new(Point2::new(1.0, 0.0), 0.6).unwrap();
        let cfg = LocalizerConfig::default();
        let pts = coarse_points(&region, &cfg);
        for idx in [100, 1500, 2500] {
            let p = pts[idx];
            let h = channel_at(&g, p, 0.7, 2.1);
            let loc = localize(&h, &g, &region, &cfg).unwrap();
            assert_eq!(loc.position, p);
            assert!((loc.score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_is_scale_invariant() {
        let g = line();
        let region = UniformDisk::new(Point2::new(1.0, 0.0), 0.6).unwrap();
        let h = channel_at(&g, Point2::new(1.1, 0.05), 1.0, 0.0) + channel_at(&g, Point2::new(0.9, -0.1), 0.3, 1.0);
        let a = localize(&h, &g, &region, &LocalizerConfig::default()).unwrap();
        let b = localize(&(&h * c64(-3.0, 0.4)), &g, &region, &LocalizerConfig::default()).unwrap();
        // Rounding differs after scaling, so the continuous polish may stop at a
        // slightly different point.
        assert!(a.position.distance(&b.position) < 1e-6);
        assert!((a.score - b.score).abs() < 1e-12);
        assert!(a.score <= 1.0 && a.score >= 0.0);
    }

    #[test]
    fn zero_estimate_is_undefined() {
        let g = line();
        let region = UniformDisk::new(Point2::new(1.0, 0.0), 0.6).unwrap();
        assert!(matches!(
            localize(&CVec::zeros(16), &g, &region, &LocalizerConfig::default()),
            Err(Error::UndefinedEstimate(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = LocalizerConfig { coarse_grid: 1, ..LocalizerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LocalizerConfig { refine_shrink: 1.0, ..LocalizerConfig::default() };
        assert!(bad.validate().is_err());
    }
}
