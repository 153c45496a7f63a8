//! Linear channel estimators and their analytic error covariances.
//!
//! Every estimator is linear in the observation `y = O r`, `r = h + z`, with
//! `z ~ CN(0, σ_z² I)`. [`LinearEstimator`] stores the observation operator
//! `O`, the gain `W` (so that `ĥ = W y`) and the analytic error covariance.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{channel_at, CovarianceModel, Subspace};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, GainModel, PositionPrior};
use crate::linalg::{hpd_solve, real, trace_re, CMat, CVec};
use crate::rng::{complex_normal, complex_normal_vec, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    MmseFull,
    MmseIdeal,
    RslsIdeal,
    MmseSim,
    RslsSim,
    DigitalBaseline,
}

impl EstimatorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::MmseFull => "mmse-full",
            EstimatorTag::MmseIdeal => "mmse-ideal",
            EstimatorTag::RslsIdeal => "rsls-ideal",
            EstimatorTag::MmseSim => "mmse-sim",
            EstimatorTag::RslsSim => "rsls-sim",
            EstimatorTag::DigitalBaseline => "digital-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EstimatorTag::MmseFull,
            EstimatorTag::MmseIdeal,
            EstimatorTag::RslsIdeal,
            EstimatorTag::MmseSim,
            EstimatorTag::RslsSim,
            EstimatorTag::DigitalBaseline,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Smallest accepted ratio of extreme singular values of `V U`.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// What the receiver observes.
#[derive(Debug, Clone)]
pub enum ObservationMode {
    FullArray,
    IdealProjection(CMat),
    SimProjection(CMat),
    DigitalBaseline,
}

#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub mode: ObservationMode,
    /// Per-element interference power `σ_z²`.
    pub noise_variance: f64,
}

impl ObservationModel {
    pub fn new(mode: ObservationMode, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::config("noise.variance", "must be positive and finite"));
        }
        Ok(ObservationModel { mode, noise_variance })
    }

    /// Observation operator `O` (the identity for full-array modes).
    pub fn operator(&self, k: usize) -> CMat {
        match &self.mode {
            ObservationMode::FullArray | ObservationMode::DigitalBaseline => CMat::identity(k, k),
            ObservationMode::IdealProjection(v) | ObservationMode::SimProjection(v) => v.clone(),
        }
    }

    pub fn observe(&self, h: &CVec, z: &CVec) -> CVec {
        let r = h + z;
        match &self.mode {
            ObservationMode::FullArray | ObservationMode::DigitalBaseline => r,
            ObservationMode::IdealProjection(v) | ObservationMode::SimProjection(v) => v * r,
        }
    }
}

/// `σ_z²` for an SNR in dB, relative to the mean received energy per element.
pub fn noise_variance_for_snr(r_h: &CMat, snr_db: f64) -> f64 {
    trace_re(r_h) / r_h.nrows() as f64 / 10f64.powf(snr_db / 10.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub tag: EstimatorTag,
    #[serde(skip)]
    pub h_hat: CVec,
    #[serde(skip)]
    pub error_covariance: CMat,
    pub scalar_mse: f64,
    /// Out-of-subspace bias energy not included in `error_covariance`
    /// (nonzero only for the least-squares estimators).
    pub truncation_residual: f64,
}

impl EstimationReport {
    pub fn normalized_mse(&self, r_h: &CMat) -> f64 {
        self.scalar_mse / trace_re(r_h)
    }
}

/// A linear estimator bound to its observation operator.
#[derive(Debug, Clone)]
pub struct LinearEstimator {
    pub tag: EstimatorTag,
    pub operator: CMat,
    pub gain: CMat,
    /// Analytic error covariance.
    pub error_covariance: CMat,
    pub truncation_residual: f64,
}

impl LinearEstimator {
    pub fn scalar_mse(&self) -> f64 {
        trace_re(&self.error_covariance)
    }

    /// Total MSE including any truncation bias.
    pub fn total_mse(&self) -> f64 {
        self.scalar_mse() + self.truncation_residual
    }

    /// `ĥ = W y`.
    pub fn estimate(&self, y: &CVec) -> Result<CVec> {
        if y.len() != self.gain.ncols() {
            return Err(Error::dimension("observation", self.gain.ncols(), y.len()));
        }
        Ok(&self.gain * y)
    }

    pub fn report(&self, y: &CVec) -> Result<EstimationReport> {
        Ok(EstimationReport {
            tag: self.tag,
            h_hat: self.estimate(y)?,
            error_covariance: self.error_covariance.clone(),
            scalar_mse: self.scalar_mse(),
            truncation_residual: self.truncation_residual,
        })
    }

    /// Exact error covariance `(I − B) R (I − B)^H + σ² B B^H`, `B = W O`.
    pub fn exact_error_covariance(&self, r_h: &CMat, sigma_z2: f64) -> CMat {
        let k = r_h.nrows();
        let b = &self.gain * &self.operator;
        let ib = CMat::identity(k, k) - &b;
        &ib * r_h * ib.adjoint() + (&b * b.adjoint()).scale(sigma_z2)
    }
}

fn check_square(r_h: &CMat) -> Result<usize> {
    if !r_h.is_square() {
        return Err(Error::dimension("covariance", "square", format!("{}x{}", r_h.nrows(), r_h.ncols())));
    }
    Ok(r_h.nrows())
}

fn check_noise(sigma_z2: f64) -> Result<()> {
    if !(sigma_z2 > 0.0 && sigma_z2.is_finite()) {
        return Err(Error::config("noise.variance", "must be positive and finite"));
    }
    Ok(())
}

/// Full-array MMSE, `ĥ = R (R + σ² I)⁻¹ r`, solved by Cholesky.
pub fn mmse_full_estimator(r_h: &CMat, sigma_z2: f64) -> Result<LinearEstimator> {
    mmse_full_tagged(r_h, sigma_z2, EstimatorTag::MmseFull)
}

/// Fully digital baseline: full-array MMSE on every element.
pub fn digital_baseline_estimator(r_h: &CMat, sigma_z2: f64) -> Result<LinearEstimator> {
    mmse_full_tagged(r_h, sigma_z2, EstimatorTag::DigitalBaseline)
}

fn mmse_full_tagged(r_h: &CMat, sigma_z2: f64, tag: EstimatorTag) -> Result<LinearEstimator> {
    let k = check_square(r_h)?;
    check_noise(sigma_z2)?;
    let reg = r_h + CMat::identity(k, k).scale(sigma_z2);
    // (R + σ²I)⁻¹ R is the adjoint of the gain since both factors are Hermitian.
    let gain = hpd_solve(&reg, r_h, "R_h + sigma^2 I")?.adjoint();
    let err = r_h - &gain * r_h;
    let err = (&err + err.adjoint()).scale(0.5);
    Ok(LinearEstimator {
        tag,
        operator: CMat::identity(k, k),
        gain,
        error_covariance: err,
        truncation_residual: 0.0,
    })
}

/// Full-array MMSE in spectral form, `U_K diag(λ/(λ+σ²)) U_K^H`.
pub fn mmse_spectral_estimator(cov: &CovarianceModel, sigma_z2: f64) -> Result<LinearEstimator> {
    check_noise(sigma_z2)?;
    let k = cov.dim();
    let q = &cov.eigenvectors;
    let shrink = CVec::from_iterator(k, cov.eigenvalues.iter().map(|&l| real(l.max(0.0) / (l.max(0.0) + sigma_z2))));
    let errd = CVec::from_iterator(k, cov.eigenvalues.iter().map(|&l| real(l.max(0.0) * sigma_z2 / (l.max(0.0) + sigma_z2))));
    let gain = q * CMat::from_diagonal(&shrink) * q.adjoint();
    let err = q * CMat::from_diagonal(&errd) * q.adjoint();
    Ok(LinearEstimator {
        tag: EstimatorTag::MmseFull,
        operator: CMat::identity(k, k),
        gain,
        error_covariance: (&err + err.adjoint()).scale(0.5),
        truncation_residual: 0.0,
    })
}

/// MMSE on the sufficient statistic `y = U^H r`: `ĥ = U D (D + σ² I)⁻¹ y`.
///
/// The error covariance is `R − U D (D+σ²I)⁻¹ D U^H`, exact for eigenvector
/// bases of `R` of any width.
pub fn mmse_reduced_estimator(r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<LinearEstimator> {
    let k = check_square(r_h)?;
    check_noise(sigma_z2)?;
    if sub.u.nrows() != k {
        return Err(Error::dimension("subspace rows", k, sub.u.nrows()));
    }
    let l = sub.rank();
    let shrink = CVec::from_iterator(l, sub.d.iter().map(|&d| real(d / (d + sigma_z2))));
    let gain = &sub.u * CMat::from_diagonal(&shrink);
    let kept = CVec::from_iterator(l, sub.d.iter().map(|&d| real(d * d / (d + sigma_z2))));
    let err = r_h - &sub.u * CMat::from_diagonal(&kept) * sub.u.adjoint();
    Ok(LinearEstimator {
        tag: EstimatorTag::MmseIdeal,
        operator: sub.u.adjoint(),
        gain,
        error_covariance: (&err + err.adjoint()).scale(0.5),
        truncation_residual: 0.0,
    })
}

/// RS-LS on `y = U^H r`: `ĥ = U y`, error covariance `σ² U U^H` for in-subspace channels.
pub fn rsls_ideal_estimator(r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<LinearEstimator> {
    let k = check_square(r_h)?;
    check_noise(sigma_z2)?;
    if sub.u.nrows() != k {
        return Err(Error::dimension("subspace rows", k, sub.u.nrows()));
    }
    let proj = &sub.u * sub.u.adjoint();
    let out = CMat::identity(k, k) - &proj;
    let residual = trace_re(&(&out * r_h * out.adjoint()));
    Ok(LinearEstimator {
        tag: EstimatorTag::RslsIdeal,
        operator: sub.u.adjoint(),
        gain: sub.u.clone(),
        error_covariance: proj.scale(sigma_z2),
        truncation_residual: residual.max(0.0),
    })
}

/// MMSE after the SIM: `ĥ = R V^H (V R V^H + σ² V V^H)⁻¹ y`.
///
/// `V` exactly equal to `U^H` takes the reduced-statistic path.
pub fn mmse_post_sim_estimator(v: &CMat, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<LinearEstimator> {
    let k = check_square(r_h)?;
    check_noise(sigma_z2)?;
    if v.ncols() != k {
        return Err(Error::dimension("projection columns", k, v.ncols()));
    }
    if sub.u.nrows() == k && *v == sub.u.adjoint() {
        let mut est = mmse_reduced_estimator(r_h, sub, sigma_z2)?;
        est.tag = EstimatorTag::MmseSim;
        return Ok(est);
    }
    let vr = v * r_h;
    let inner = &vr * v.adjoint() + (v * v.adjoint()).scale(sigma_z2);
    let inner = (&inner + inner.adjoint()).scale(0.5);
    // gain^H = inner⁻¹ V R
    let gain_h = hpd_solve(&inner, &vr, "V R V^H + sigma^2 V V^H").map_err(|_| {
        let zero_rows = (0..v.nrows()).filter(|&i| v.row(i).norm() == 0.0).count();
        Error::Numerical(format!(
            "post-SIM MMSE inner matrix is singular ({} of {} rows of V are zero)",
            zero_rows,
            v.nrows()
        ))
    })?;
    let gain = gain_h.adjoint();
    let err = r_h - &gain * &vr;
    Ok(LinearEstimator {
        tag: EstimatorTag::MmseSim,
        operator: v.clone(),
        gain,
        error_covariance: (&err + err.adjoint()).scale(0.5),
        truncation_residual: 0.0,
    })
}

/// RS-LS after the SIM with `A = V U`: `ĝ = (A^H A)⁻¹ A^H y`, `ĥ = U ĝ`.
pub fn rsls_post_sim_estimator(v: &CMat, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<LinearEstimator> {
    let k = check_square(r_h)?;
    check_noise(sigma_z2)?;
    if v.ncols() != k || sub.u.nrows() != k {
        return Err(Error::dimension("projection columns", k, v.ncols()));
    }
    let a = v * &sub.u;
    let rank_error = || {
        let delta_u = crate::linalg::spectral_norm(&(&a - CMat::identity(a.nrows(), a.ncols())));
        Error::Numerical(format!(
            "A = V U is rank deficient; the projection is too far from the target subspace (delta_U = {delta_u:.3})"
        ))
    };
    let sv = crate::linalg::singular_values(&a);
    if sv.len() < a.ncols() || !(sv[sv.len() - 1] > RANK_TOLERANCE * sv[0]) {
        return Err(rank_error());
    }
    let aha = a.adjoint() * &a;
    let ls = hpd_solve(&aha, &a.adjoint(), "A^H A").map_err(|_| rank_error())?;
    let c_g = &ls * (v * v.adjoint()).scale(sigma_z2) * ls.adjoint();
    let c_g = (&c_g + c_g.adjoint()).scale(0.5);
    let gain = &sub.u * &ls;
    let b = &gain * v;
    let ib = CMat::identity(k, k) - &b;
    let bias = trace_re(&(&ib * r_h * ib.adjoint())).max(0.0);
    Ok(LinearEstimator {
        tag: EstimatorTag::RslsSim,
        operator: v.clone(),
        gain,
        error_covariance: &sub.u * c_g * sub.u.adjoint(),
        truncation_residual: bias,
    })
}

/// Convenience forms taking the raw observation.
pub fn mmse_full(r: &CVec, r_h: &CMat, sigma_z2: f64) -> Result<EstimationReport> {
    mmse_full_estimator(r_h, sigma_z2)?.report(r)
}

pub fn mmse_reduced(y: &CVec, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<EstimationReport> {
    mmse_reduced_estimator(r_h, sub, sigma_z2)?.report(y)
}

pub fn rsls_ideal(y: &CVec, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<EstimationReport> {
    rsls_ideal_estimator(r_h, sub, sigma_z2)?.report(y)
}

pub fn mmse_post_sim(y: &CVec, v: &CMat, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<EstimationReport> {
    mmse_post_sim_estimator(v, r_h, sub, sigma_z2)?.report(y)
}

pub fn rsls_post_sim(y: &CVec, v: &CMat, r_h: &CMat, sub: &Subspace, sigma_z2: f64) -> Result<EstimationReport> {
    rsls_post_sim_estimator(v, r_h, sub, sigma_z2)?.report(y)
}

pub fn digital_baseline(r: &CVec, r_h: &CMat, sigma_z2: f64) -> Result<EstimationReport> {
    digital_baseline_estimator(r_h, sigma_z2)?.report(r)
}

/// Channel distribution for Monte Carlo trials.
pub enum ChannelSource<'a> {
    /// `h = G e^{jθ} a(p)` with `p` from the prior and `(G, θ)` from the gain model.
    Physical {
        geometry: &'a ArrayGeometry,
        region: &'a dyn PositionPrior,
        gains: &'a GainModel,
    },
    /// `h = U diag(√d) w`, `w ~ CN(0, I)`: Gaussian and exactly in the subspace.
    SubspaceGaussian(&'a Subspace),
}

impl ChannelSource<'_> {
    /// Draw the channel for trial `index`.
    pub fn draw(&self, seed: u64, index: u64) -> CVec {
        match self {
            ChannelSource::Physical { geometry, region, gains } => {
                let p = region.sample_at(seed, index);
                let mut rng = stream_rng(seed ^ 0x5eed_0001, index);
                let (g, th) = gains.sample(&mut rng);
                channel_at(geometry, p, g, th)
            }
            ChannelSource::SubspaceGaussian(sub) => {
                let mut rng = stream_rng(seed ^ 0x5eed_0002, index);
                let w = CVec::from_iterator(sub.rank(), sub.d.iter().map(|&d| complex_normal(&mut rng, d.max(0.0))));
                &sub.u * w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonteCarloMse {
    pub mse: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Empirical `E‖h − ĥ‖²` over fresh channel and noise draws.
pub fn monte_carlo_mse(
    model: &ObservationModel,
    estimator: &LinearEstimator,
    source: &ChannelSource<'_>,
    trials: usize,
    rng_seed: u64,
) -> Result<MonteCarloMse> {
    if trials < 100 {
        return Err(Error::config("sweep.trials", "at least 100 trials are required"));
    }
    let k = estimator.gain.nrows();
    let errs: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let h = source.draw(rng_seed, i);
            let mut rng = stream_rng(rng_seed ^ 0x0015_e000, i);
            let z = complex_normal_vec(&mut rng, k, model.noise_variance);
            let y = model.observe(&h, &z);
            let h_hat = &estimator.gain * y;
            (h - h_hat).norm_squared()
        })
        .collect();
    Ok(summarize(&errs))
}

pub(crate) fn summarize(samples: &[f64]) -> MonteCarloMse {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MonteCarloMse {
        mse: mean,
        stderr: (var / n).sqrt(),
        trials: samples.len(),
    }
}
