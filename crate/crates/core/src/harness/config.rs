//! Scenario configuration (TOML) and the bundled presets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::NoiseMapping;
use crate::channel::DEFAULT_RANK_THRESHOLD;
use crate::error::{Error, Result};
use crate::geometry::{GainModel, GeometryConfig, Point2, UniformDisk};
use crate::localizer::LocalizerConfig;
use crate::multiport::{AnalyticImpedance, ImpedanceProvider};
use crate::simopt::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    /// Distance from the array center to the disk center, meters.
    pub center_distance: f64,
    /// Bearing of the disk center from the array broadside, degrees.
    pub angle_deg: f64,
    pub diameter: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            center_distance: 1.0,
            angle_deg: 0.0,
            diameter: 0.6,
        }
    }
}

impl RegionConfig {
    pub fn disk(&self) -> Result<UniformDisk> {
        disk_at(self.center_distance, self.angle_deg.to_radians(), self.diameter)
    }
}

pub fn disk_at(distance: f64, angle: f64, diameter: f64) -> Result<UniformDisk> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::config("region.center_distance", "must be positive"));
    }
    UniformDisk::new(Point2::from_polar(distance, angle), diameter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionConfig {
    /// Number of retained eigenvectors `L`; zero uses the numerical rank.
    pub rank: usize,
    pub rank_threshold: f64,
    pub cov_samples: usize,
    pub target_delta_u: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            rank: 4,
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            cov_samples: 20_000,
            target_delta_u: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub snr_db: Vec<f64>,
    /// Mapping from the estimation residual to the localization noise.
    pub mapping: NoiseMapping,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            snr_db: vec![0.0, 10.0],
            mapping: NoiseMapping::White,
        }
    }
}

/// Where the SIM phases used by the sweep come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimSource {
    /// Ideal projection only; no SIM estimators.
    Off,
    /// Optimize the phases for every cell.
    Optimize,
    /// Load `eta_<distance>_<angle>.txt` from `sweep.eta_dir`.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub distances: Vec<f64>,
    pub angles_deg: Vec<f64>,
    /// Monte Carlo trials for the empirical MSE (0 disables).
    pub trials: usize,
    /// Trials for the localization RMSE (0 disables).
    pub localization_trials: usize,
    pub seed: u64,
    /// Worker threads (0 uses all cores).
    pub workers: usize,
    pub sim: SimSource,
    pub eta_dir: Option<PathBuf>,
    /// Optimizer restarts per cell; the first converged start is kept.
    pub optimizer_starts: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            distances: vec![0.5, 1.0, 2.0, 4.0],
            angles_deg: vec![0.0, 30.0, 60.0],
            trials: 2000,
            localization_trials: 200,
            seed: 1,
            workers: 0,
            sim: SimSource::Optimize,
            eta_dir: None,
            optimizer_starts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Analytic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpedanceConfig {
    pub provider: ProviderKind,
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub model: AnalyticImpedance,
}

impl Default for ImpedanceConfig {
    fn default() -> Self {
        ImpedanceConfig {
            provider: ProviderKind::Analytic,
            path: None,
            model: AnalyticImpedance::default(),
        }
    }
}

impl ImpedanceConfig {
    pub fn provider(&self) -> Result<ImpedanceProvider> {
        match self.provider {
            ProviderKind::Analytic => Ok(ImpedanceProvider::Analytic(self.model.clone())),
            ProviderKind::File => {
                let path = self
                    .path
                    .clone()
                    .ok_or_else(|| Error::config("impedance.path", "required when provider = \"file\""))?;
                Ok(ImpedanceProvider::File { path, model: self.model.clone() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub geometry: GeometryConfig,
    pub region: RegionConfig,
    pub gain: GainModel,
    pub reduction: ReductionConfig,
    pub noise: NoiseConfig,
    pub sweep: SweepConfig,
    pub impedance: ImpedanceConfig,
    pub optimizer: OptimizerConfig,
    pub localizer: LocalizerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        desk_scale()
    }
}

/// 16×1 elements, three layers, four receiver chains.
pub fn desk_scale() -> ScenarioConfig {
    ScenarioConfig {
        name: "desk-scale".into(),
        geometry: GeometryConfig::default(),
        region: RegionConfig::default(),
        gain: GainModel::default(),
        reduction: ReductionConfig::default(),
        noise: NoiseConfig::default(),
        sweep: SweepConfig::default(),
        impedance: ImpedanceConfig::default(),
        optimizer: OptimizerConfig::default(),
        localizer: LocalizerConfig::default(),
    }
}

/// 64×4 elements, seven layers, six receiver chains. The element spacing
/// gives an aperture of about 0.32 m. SIM optimization at this size needs one
/// 3584-port factorization per evaluation, so the sweep uses the ideal
/// projection unless `sweep.sim` is changed.
pub fn paper_scale() -> ScenarioConfig {
    let geometry = GeometryConfig {
        k_y: 64,
        k_z: 4,
        layers: 7,
        element_spacing_wl: PAPER_ELEMENT_SPACING_WL,
        ..GeometryConfig::default()
    };
    ScenarioConfig {
        name: "paper-scale".into(),
        geometry,
        region: RegionConfig {
            center_distance: 4.0,
            ..RegionConfig::default()
        },
        reduction: ReductionConfig {
            rank: 6,
            ..ReductionConfig::default()
        },
        sweep: SweepConfig {
            distances: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            sim: SimSource::Off,
            trials: 1000,
            ..SweepConfig::default()
        },
        ..desk_scale()
    }
}

/// Spacing (in wavelengths at 28 GHz) giving a 0.32 m aperture along the 64-element axis.
pub const PAPER_ELEMENT_SPACING_WL: f64 = 0.32 / 63.0 / (crate::geometry::SPEED_OF_LIGHT / 28e9);

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "desk-scale" => Ok(desk_scale()),
        "paper-scale" => Ok(paper_scale()),
        other => Err(Error::config("preset", format!("unknown preset '{other}' (expected desk-scale or paper-scale)"))),
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn angles(&self) -> Vec<f64> {
        self.sweep.angles_deg.iter().map(|a| a.to_radians()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.region.disk()?;
        self.gain.validate()?;
        let k = self.geometry.k_y * self.geometry.k_z;
        if self.reduction.rank > k {
            return Err(Error::config("reduction.rank", format!("must not exceed the element count {k}")));
        }
        if !(self.reduction.rank_threshold > 0.0 && self.reduction.rank_threshold < 1.0) {
            return Err(Error::config("reduction.rank_threshold", "must lie in (0, 1)"));
        }
        if self.reduction.cov_samples == 0 {
            return Err(Error::config("reduction.cov_samples", "must be positive"));
        }
        if !(self.reduction.target_delta_u >= 0.0) {
            return Err(Error::config("reduction.target_delta_u", "must be nonnegative"));
        }
        if self.noise.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("noise.snr_db", "values must be finite"));
        }
        for &d in &self.sweep.distances {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config("sweep.distances", "values must be positive"));
            }
        }
        if self.sweep.angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("sweep.angles_deg", "values must be finite"));
        }
        if self.sweep.trials != 0 && self.sweep.trials < 100 {
            return Err(Error::config("sweep.trials", "use 0 or at least 100"));
        }
        if self.sweep.optimizer_starts == 0 {
            return Err(Error::config("sweep.optimizer_starts", "must be at least 1"));
        }
        if self.sweep.sim == SimSource::Files {
            match &self.sweep.eta_dir {
                None => return Err(Error::config("sweep.eta_dir", "required when sweep.sim = \"files\"")),
                Some(d) if !d.is_dir() => {
                    return Err(Error::config("sweep.eta_dir", format!("directory {} does not exist", d.display())))
                }
                _ => {}
            }
        }
        self.impedance.model.validate()?;
        if self.impedance.provider == ProviderKind::File {
            match &self.impedance.path {
                None => return Err(Error::config("impedance.path", "required when provider = \"file\"")),
                Some(p) if !p.is_file() => {
                    return Err(Error::config("impedance.path", format!("file {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        self.optimizer.validate()?;
        self.localizer.validate()?;
        Ok(())
    }

    /// `L` for a given numerical rank.
    pub fn rank_for(&self, numerical_rank: usize) -> usize {
        if self.reduction.rank == 0 {
            numerical_rank.max(1)
        } else {
            self.reduction.rank
        }
    }
}

/// File name for the phases of one sweep cell.
pub fn eta_file_name(distance: f64, angle: f64) -> String {
    format!("eta_{}_{}.txt", fmt_key(distance), fmt_key(angle.to_degrees()))
}

fn fmt_key(x: f64) -> String {
    let s = format!("{:.4}", x);
    s.trim_end_matches('0').trim_end_matches('.').replace('-', "m").replace('.', "p")
}

/// Default bearing list, in radians.
pub fn default_angles() -> Vec<f64> {
    vec![0.0, PI / 6.0, PI / 3.0]
}
