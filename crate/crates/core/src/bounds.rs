//! Projection mismatch metrics, the perturbation bound on the RS-LS error,
//! and the Fisher information / position error bound.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EstimationReport;
use crate::geometry::ArrayGeometry;
use crate::linalg::{c64, hermitian_eigen, hermitian_pinv, spectral_norm, trace_re, CMat, C64};
use crate::multiport::row_orthonormality_gap;

/// Condition number (of the diagonally equilibrated FIM) above which it is
/// pseudo-inverted and flagged.
pub const FIM_CONDITION_LIMIT: f64 = 1e12;
/// Tolerance on `‖VV^H − I‖₂` for the energy-preserving bound to apply.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct MismatchMetrics {
    pub delta_rel: f64,
    pub delta_u: f64,
    /// `‖E‖₂` with `E = ΔU + (ΔU)^H + (ΔU)^H ΔU`.
    pub e_norm: f64,
    pub eig_box: (f64, f64),
    /// `1 / (1 − (2δ_U + δ_U²))`, infinite when the denominator is not positive.
    pub mse_ratio_bound: f64,
}

/// `2δ + δ²`.
pub fn box_radius(delta_u: f64) -> f64 {
    2.0 * delta_u + delta_u * delta_u
}

pub fn mse_ratio_bound(delta_u: f64) -> f64 {
    let r = box_radius(delta_u);
    if r < 1.0 {
        1.0 / (1.0 - r)
    } else {
        f64::INFINITY
    }
}

/// Mismatch of `V` (L×K) against the target `U^H` (`U` is K×L).
pub fn mismatch_metrics(v: &CMat, u: &CMat) -> Result<MismatchMetrics> {
    let l = u.ncols();
    if v.nrows() != l || v.ncols() != u.nrows() {
        return Err(Error::dimension("projection V", format!("{}x{}", l, u.nrows()), format!("{}x{}", v.nrows(), v.ncols())));
    }
    let delta = v - u.adjoint();
    let du = &delta * u;
    let e = error_term(&du);
    let delta_u = spectral_norm(&du);
    let r = box_radius(delta_u);
    Ok(MismatchMetrics {
        delta_rel: delta.norm() / (l as f64).sqrt(),
        delta_u,
        e_norm: spectral_norm(&e),
        eig_box: (1.0 - r, 1.0 + r),
        mse_ratio_bound: mse_ratio_bound(delta_u),
    })
}

fn error_term(du: &CMat) -> CMat {
    du + du.adjoint() + du.adjoint() * du
}

/// `G(V) = (VU)^H (VU) = I + E`.
pub fn gram_operator(v: &CMat, u: &CMat) -> CMat {
    let a = v * u;
    a.adjoint() * a
}

#[derive(Debug, Clone, Serialize)]
pub struct MseRatioCheck {
    /// `tr(G(V)⁻¹)/L`, or `NaN` when `G(V)` is singular.
    pub actual_ratio: f64,
    pub bound: f64,
    pub holds: bool,
    /// False when `V` is not row-orthonormal, in which case `holds` is not a test of the bound.
    pub applicable: bool,
    pub orthonormality_gap: f64,
}

/// Compare the RS-LS degradation `tr(G(V)⁻¹)/L` against its bound.
///
/// With orthonormal rows of `V` the RS-LS error covariance is `σ_z² G(V)⁻¹`, so
/// the ratio does not depend on `σ_z²`; it is accepted for interface symmetry.
pub fn mse_ratio_check(v: &CMat, u: &CMat, sigma_z2: f64) -> Result<MseRatioCheck> {
    if !(sigma_z2 > 0.0) {
        return Err(Error::config("noise.variance", "must be positive"));
    }
    let m = mismatch_metrics(v, u)?;
    let gap = row_orthonormality_gap(v);
    let g = gram_operator(v, u);
    let l = u.ncols() as f64;
    let actual = match g.clone().cholesky() {
        Some(ch) => trace_re(&ch.inverse()) / l,
        None => f64::NAN,
    };
    let applicable = gap <= ORTHONORMALITY_TOLERANCE;
    let holds = if !applicable || m.mse_ratio_bound.is_infinite() {
        true
    } else {
        actual <= m.mse_ratio_bound + 1e-9
    };
    Ok(MseRatioCheck {
        actual_ratio: actual,
        bound: m.mse_ratio_bound,
        holds,
        applicable,
        orthonormality_gap: gap,
    })
}

/// Eigenvalues of `G(V)` (ascending is not guaranteed; use min/max).
pub fn gram_eigenvalues(v: &CMat, u: &CMat) -> Vec<f64> {
    hermitian_eigen(&gram_operator(v, u)).values
}

/// Parameters `ε = [x, y, G, θ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub x: f64,
    pub y: f64,
    pub gain: f64,
    pub phase: f64,
}

impl ChannelParams {
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.gain, self.phase]
    }
}

/// `∂h/∂ε` as a K×4 matrix with columns `[x, y, G, θ]`.
pub fn channel_jacobian(geometry: &ArrayGeometry, eps: &ChannelParams) -> Result<CMat> {
    let (h, b) = jacobian_factors(geometry, eps)?;
    Ok(CMat::from_fn(h.len(), 4, |i, c| h[i] * b[(i, c)]))
}

/// Factorization `J = diag(h) B`, with `|h_k| = G`.
fn jacobian_factors(geometry: &ArrayGeometry, eps: &ChannelParams) -> Result<(Vec<C64>, CMat)> {
    if !(eps.gain > 0.0) {
        return Err(Error::config("params.gain", "must be positive"));
    }
    let k = geometry.len();
    let kw = 2.0 * PI / geometry.wavelength;
    let rot = c64(eps.phase.cos(), eps.phase.sin()) * eps.gain;
    let mut h = Vec::with_capacity(k);
    let mut b = CMat::zeros(k, 4);
    for (i, e) in geometry.positions.iter().enumerate() {
        let dx = eps.x - e[0];
        let dy = eps.y - e[1];
        let d = (dx * dx + dy * dy + e[2] * e[2]).sqrt();
        if d == 0.0 {
            return Err(Error::GeometricSingularity { element: i });
        }
        let (s, c) = (-kw * d).sin_cos();
        h.push(rot * c64(c, s));
        b[(i, 0)] = c64(0.0, -kw * dx / d);
        b[(i, 1)] = c64(0.0, -kw * dy / d);
        b[(i, 2)] = c64(1.0 / eps.gain, 0.0);
        b[(i, 3)] = c64(0.0, 1.0);
    }
    Ok((h, b))
}

#[derive(Debug, Clone, Serialize)]
pub struct PebReport {
    pub fim: DMatrix<f64>,
    pub crlb: DMatrix<f64>,
    pub peb: f64,
    /// Set when the FIM was pseudo-inverted.
    pub condition_flag: bool,
    pub condition: f64,
    pub params: ChannelParams,
}

/// White-noise FIM `(1/σ_n²) Re{J^H J}` and the resulting PEB.
///
/// `σ_n²` is the variance of each real component of the observation noise.
pub fn fim_peb(geometry: &ArrayGeometry, eps: &ChannelParams, sigma_n2: f64) -> Result<PebReport> {
    if !(sigma_n2 > 0.0) {
        return Err(Error::config("noise.sigma_n2", "must be positive"));
    }
    // Re{J^H J} = G² Re{B^H B} because every |h_k| equals G.
    let (_, b) = jacobian_factors(geometry, eps)?;
    let bb = b.adjoint() * &b;
    let g2 = eps.gain * eps.gain;
    let fim = DMatrix::from_fn(4, 4, |r, c| bb[(r, c)].re * g2 / sigma_n2);
    Ok(report_from_fim(fim, *eps))
}

/// FIM under colored complex noise with covariance `C`: `2 Re{J^H C⁺ J}`.
///
/// For `C = 2σ_n² I` this equals the white-noise FIM.
pub fn fim_peb_colored(geometry: &ArrayGeometry, eps: &ChannelParams, noise_cov: &CMat) -> Result<PebReport> {
    let k = geometry.len();
    if noise_cov.shape() != (k, k) {
        return Err(Error::dimension("noise covariance", format!("{k}x{k}"), format!("{}x{}", noise_cov.nrows(), noise_cov.ncols())));
    }
    let j = channel_jacobian(geometry, eps)?;
    let (cinv, _) = hermitian_pinv(noise_cov, 1e-12);
    let m = j.adjoint() * cinv * &j;
    let fim = DMatrix::from_fn(4, 4, |a, b| 2.0 * m[(a, b)].re);
    Ok(report_from_fim(fim, *eps))
}

fn report_from_fim(fim: DMatrix<f64>, params: ChannelParams) -> PebReport {
    let fim = (&fim + fim.transpose()) * 0.5;
    let n = fim.nrows();
    // Equilibrate so the condition number does not depend on parameter units.
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let v = fim[(i, i)];
            if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| fim[(i, j)] * d[i] * d[j]);
    let eig = SymmetricEigen::new(scaled.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    let (inv, flag) = if condition <= FIM_CONDITION_LIMIT {
        match scaled.clone().cholesky() {
            Some(ch) => (ch.inverse(), false),
            None => (real_pinv(&eig, max), true),
        }
    } else {
        (real_pinv(&eig, max), true)
    };
    let crlb = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * d[i] * d[j]);
    let peb = (crlb[(0, 0)] + crlb[(1, 1)]).max(0.0).sqrt();
    PebReport {
        fim,
        crlb,
        peb,
        condition_flag: flag,
        condition,
        params,
    }
}

fn real_pinv(eig: &SymmetricEigen<f64, nalgebra::Dyn>, max: f64) -> DMatrix<f64> {
    let n = eig.eigenvalues.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let l = eig.eigenvalues[i];
        if l > max / FIM_CONDITION_LIMIT {
            let v = eig.eigenvectors.column(i);
            out += (&v * v.transpose()) / l;
        }
    }
    out
}

/// How the estimation residual is mapped to the localization noise model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMapping {
    /// Trace-matched white noise.
    #[default]
    White,
    /// Full residual covariance (whitened Jacobian).
    Colored,
}

/// White-equivalent per-real-component variance `tr(C) / (2K)`.
pub fn effective_noise_from_estimation(report: &EstimationReport) -> f64 {
    effective_noise(&report.error_covariance)
}

pub fn effective_noise(cov: &CMat) -> f64 {
    (trace_re(cov) / (2.0 * cov.nrows() as f64)).max(0.0)
}

/// PEB for an estimation residual, under the chosen mapping.
pub fn peb_from_residual(geometry: &ArrayGeometry, eps: &ChannelParams, residual: &CMat, mapping: NoiseMapping) -> Result<PebReport> {
    match mapping {
        NoiseMapping::White => {
            let s = effective_noise(residual);
            if !(s > 0.0) {
                return Err(Error::Numerical("residual covariance has zero trace".into()));
            }
            fim_peb(geometry, eps, s)
        }
        NoiseMapping::Colored => fim_peb_colored(geometry, eps, residual),
    }
}

/// Used by tests and the CLI to describe `E` directly.
pub fn mismatch_error_matrix(v: &CMat, u: &CMat) -> CMat {
    let du = (v - u.adjoint()) * u;
    error_term(&du)
}
