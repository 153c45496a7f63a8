//! Near-field steering vectors, channel draws and the channel covariance.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, GainModel, Point2, PositionPrior};
use crate::linalg::{c64, hermitian_eigen, real, trace_re, CMat, CVec};
use crate::rng::stream_rng;

/// Default number of Monte Carlo samples for the covariance integral.
pub const DEFAULT_COVARIANCE_SAMPLES: usize = 20_000;
/// Default relative eigenvalue threshold defining the numerical rank.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SteeringVector {
    pub entries: CVec,
    pub position: Point2,
}

/// `a_k(p) = exp(-j 2π d_k(p) / λ)` for every element of `geometry`.
pub fn steering_vector(geometry: &ArrayGeometry, p: Point2) -> SteeringVector {
    SteeringVector {
        entries: steering_entries(geometry, p),
        position: p,
    }
}

pub(crate) fn steering_entries(geometry: &ArrayGeometry, p: Point2) -> CVec {
    let k = 2.0 * PI / geometry.wavelength;
    let d = geometry.distances(p);
    CVec::from_iterator(d.len(), d.iter().map(|&d| {
        let (s, c) = (-k * d).sin_cos();
        c64(c, s)
    }))
}

#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: CVec,
    pub gain: f64,
    pub phase: f64,
    pub position: Point2,
}

/// `h = G e^{jθ} a(p)`.
pub fn channel_at(geometry: &ArrayGeometry, p: Point2, gain: f64, phase: f64) -> CVec {
    let rot = c64(phase.cos(), phase.sin()) * gain;
    steering_entries(geometry, p) * rot
}

/// Channel at `p` with a random gain and phase drawn from `gains`.
pub fn draw_channel(geometry: &ArrayGeometry, p: Point2, gains: &GainModel, rng_seed: u64) -> ChannelRealization {
    let mut rng = stream_rng(rng_seed, 0);
    let (gain, phase) = gains.sample(&mut rng);
    ChannelRealization {
        h: channel_at(geometry, p, gain, phase),
        gain,
        phase,
        position: p,
    }
}

/// Dominant eigenpairs of a covariance matrix.
#[derive(Debug, Clone)]
pub struct Subspace {
    /// `K × L` orthonormal basis.
    pub u: CMat,
    /// The `L` matching eigenvalues, descending.
    pub d: Vec<f64>,
}

impl Subspace {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// The ideal projection `U^H`.
    pub fn projection(&self) -> CMat {
        self.u.adjoint()
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub r_h: CMat,
    /// Descending eigenvalues of `r_h`.
    pub eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors matching `eigenvalues`.
    pub eigenvectors: CMat,
    /// Number of eigenvalues above `rank_threshold * λ_max`.
    pub rank: usize,
    pub u: CMat,
    pub d: Vec<f64>,
    pub mc_samples: usize,
    pub rank_threshold: f64,
    /// Monte Carlo standard error of the top eigenvalue (Rayleigh quotient at
    /// the estimated dominant eigenvector). Zero for exact inputs.
    pub top_eigenvalue_stderr: f64,
}

impl CovarianceModel {
    /// Eigendecompose a Hermitian PSD matrix and extract the numerical-rank subspace.
    pub fn from_matrix(r_h: CMat, rank_threshold: f64) -> Result<Self> {
        if !r_h.is_square() {
            return Err(Error::dimension("covariance", "square matrix", format!("{}x{}", r_h.nrows(), r_h.ncols())));
        }
        if !(rank_threshold > 0.0 && rank_threshold < 1.0) {
            return Err(Error::config("reduction.rank_threshold", "must lie in (0, 1)"));
        }
        let eig = hermitian_eigen(&r_h);
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let rank = eig.values.iter().filter(|&&l| l > rank_threshold * top).count();
        let u = eig.vectors.columns(0, rank).into_owned();
        let d = eig.values[..rank].to_vec();
        Ok(CovarianceModel {
            r_h,
            eigenvalues: eig.values,
            eigenvectors: eig.vectors,
            rank,
            u,
            d,
            mc_samples: 0,
            rank_threshold,
            top_eigenvalue_stderr: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.r_h.nrows()
    }

    pub fn trace(&self) -> f64 {
        trace_re(&self.r_h)
    }

    /// Subspace at the numerical rank.
    pub fn subspace(&self) -> Subspace {
        Subspace {
            u: self.u.clone(),
            d: self.d.clone(),
        }
    }

    /// Fraction of `tr(R_h)` captured by the `l` dominant eigenvalues.
    pub fn captured_energy(&self, l: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().take(l).map(|v| v.max(0.0)).sum::<f64>() / total
    }

    /// Smallest number of dominant eigenvalues holding at least `fraction` of the energy.
    pub fn energy_rank(&self, fraction: f64) -> usize {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut acc = 0.0;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            acc += v.max(0.0);
            if acc >= fraction * total * (1.0 - 1e-12) {
                return i + 1;
            }
        }
        self.eigenvalues.len()
    }

    /// Number of eigenvalues exceeding a noise floor (effective degrees of freedom
    /// that are resolvable at that noise level).
    pub fn modes_above(&self, floor: f64) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > floor).count()
    }
}

/// Monte Carlo evaluation of `R_h = σ_G² E_p[a(p) a(p)^H]` over the prior.
pub fn estimate_covariance(
    geometry: &ArrayGeometry,
    region: &dyn PositionPrior,
    gains: &GainModel,
    n_samples: usize,
    rng_seed: u64,
    rank_threshold: f64,
) -> Result<CovarianceModel> {
    if n_samples < 1 {
        return Err(Error::config("reduction.cov_samples", "at least one sample is required"));
    }
    let k = geometry.len();
    let sigma_g2 = gains.second_moment();

    const CHUNK: usize = 512;
    let chunks: Vec<(usize, usize)> = (0..n_samples)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n_samples)))
        .collect();
    // Each chunk is summed independently, then chunks are added in order.
    let partial: Vec<CMat> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut a = CMat::zeros(k, e - s);
            for i in s..e {
                let p = region.sample_at(rng_seed, i as u64);
                a.set_column(i - s, &steering_entries(geometry, p));
            }
            &a * a.adjoint()
        })
        .collect();
    let mut r = CMat::zeros(k, k);
    for p in partial {
        r += p;
    }
    r *= real(sigma_g2 / n_samples as f64);
    // Exact Hermitian symmetry.
    let r = (&r + r.adjoint()).scale(0.5);

    let mut model = CovarianceModel::from_matrix(r, rank_threshold)?;
    model.mc_samples = n_samples;

    // Standard error of the top eigenvalue, from the per-sample Rayleigh quotients.
    if n_samples > 1 && model.dim() > 0 {
        let u0 = model.eigenvectors.column(0).into_owned();
        let q: Vec<f64> = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let p = region.sample_at(rng_seed, i as u64);
                sigma_g2 * u0.dotc(&steering_entries(geometry, p)).norm_sqr()
            })
            .collect();
        let mean = q.iter().sum::<f64>() / n_samples as f64;
        let var = q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_samples as f64 - 1.0);
        model.top_eigenvalue_stderr = (var / n_samples as f64).sqrt();
    }
    Ok(model)
}

/// Dominant `L` eigenpairs, where `L` is `l_fixed` or the numerical rank.
pub fn reduce_subspace(cov: &CovarianceModel, l_fixed: Option<usize>) -> Result<Subspace> {
    let k = cov.dim();
    let l = match l_fixed {
        Some(l) if l == 0 || l > k => {
            return Err(Error::config("reduction.rank", format!("fixed rank must lie in [1, {k}], got {l}")));
        }
        Some(l) => l,
        None => cov.rank,
    };
    Ok(Subspace {
        u: cov.eigenvectors.columns(0, l).into_owned(),
        d: cov.eigenvalues[..l].to_vec(),
    })
}

/// Summary of a covariance eigen-spectrum.
#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub dimension: usize,
    pub mc_samples: usize,
    pub rank_threshold: f64,
    pub numerical_rank: usize,
    pub energy_rank_99: usize,
    pub fixed_rank: usize,
    pub captured_energy_fraction: f64,
    pub trace: f64,
    pub top_eigenvalue_stderr: f64,
    pub eigenvalues: Vec<f64>,
}

impl RankReport {
    pub fn new(cov: &CovarianceModel, fixed_rank: usize) -> Self {
        RankReport {
            dimension: cov.dim(),
            mc_samples: cov.mc_samples,
            rank_threshold: cov.rank_threshold,
            numerical_rank: cov.rank,
            energy_rank_99: cov.energy_rank(0.99),
            fixed_rank,
            captured_energy_fraction: cov.captured_energy(fixed_rank),
            trace: cov.trace(),
            top_eigenvalue_stderr: cov.top_eigenvalue_stderr,
            eigenvalues: cov.eigenvalues.clone(),
        }
    }
}
