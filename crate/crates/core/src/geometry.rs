//! Spatial layout of the metasurface layers, the receiver array and the
//! transmitter uncertainty region.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn from_polar(distance: f64, angle: f64) -> Self {
        Point2::new(distance * angle.cos(), distance * angle.sin())
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn rotated(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Geometry block of a scenario.
///
/// Spacings are given in wavelengths. Element and layer spacings are not
/// fixed by the underlying system model; half a wavelength is the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub k_y: usize,
    pub k_z: usize,
    pub layers: usize,
    pub carrier_hz: f64,
    pub element_spacing_wl: f64,
    pub layer_spacing_wl: f64,
    /// Number of receiver antennas (RF chains). Zero means "same as the
    /// subspace rank".
    pub receivers: usize,
    pub receiver_spacing_wl: f64,
    /// Distance from the last layer's element plane to the receiver array.
    pub receiver_offset_wl: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            k_y: 16,
            k_z: 1,
            layers: 3,
            carrier_hz: 28e9,
            element_spacing_wl: 0.5,
            layer_spacing_wl: 0.5,
            receivers: 0,
            receiver_spacing_wl: 0.5,
            receiver_offset_wl: 1.125,
        }
    }
}

impl GeometryConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("geometry.{key}"), format!("must be positive, got {v}")))
            }
        };
        for (key, v) in [("k_y", self.k_y), ("k_z", self.k_z), ("layers", self.layers)] {
            if v == 0 {
                return Err(Error::config(format!("geometry.{key}"), "must be at least 1"));
            }
        }
        positive("carrier_hz", self.carrier_hz)?;
        positive("element_spacing_wl", self.element_spacing_wl)?;
        positive("layer_spacing_wl", self.layer_spacing_wl)?;
        positive("receiver_spacing_wl", self.receiver_spacing_wl)?;
        positive("receiver_offset_wl", self.receiver_offset_wl)?;
        Ok(())
    }
}

/// Element positions of one or more identical planar layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Cartesian positions in meters, layer-major; within a layer the
    /// element index is `iy * k_z + iz`.
    pub positions: Vec<[f64; 3]>,
    pub layers: usize,
    pub k_y: usize,
    pub k_z: usize,
    pub spacing: f64,
    pub layer_spacing: f64,
    pub wavelength: f64,
    /// Maximum pairwise distance among first-layer elements.
    pub aperture: f64,
}

impl ArrayGeometry {
    /// A stack of `layers` uniform planar arrays in the y–z plane, the first
    /// centered at `(x0, 0, 0)`, later ones offset by `layer_spacing` along +x.
    pub fn planar_stack(
        k_y: usize,
        k_z: usize,
        layers: usize,
        spacing: f64,
        layer_spacing: f64,
        wavelength: f64,
        x0: f64,
    ) -> Self {
        let mut positions = Vec::with_capacity(k_y * k_z * layers);
        for q in 0..layers {
            let x = x0 + q as f64 * layer_spacing;
            for iy in 0..k_y {
                for iz in 0..k_z {
                    let y = (iy as f64 - (k_y as f64 - 1.0) / 2.0) * spacing;
                    let z = (iz as f64 - (k_z as f64 - 1.0) / 2.0) * spacing;
                    positions.push([x, y, z]);
                }
            }
        }
        let ey = (k_y as f64 - 1.0) * spacing;
        let ez = (k_z as f64 - 1.0) * spacing;
        ArrayGeometry {
            positions,
            layers,
            k_y,
            k_z,
            spacing,
            layer_spacing,
            wavelength,
            aperture: ey.hypot(ez),
        }
    }

    pub fn elements_per_layer(&self) -> usize {
        self.k_y * self.k_z
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn layer(&self, q: usize) -> &[[f64; 3]] {
        let k = self.elements_per_layer();
        &self.positions[q * k..(q + 1) * k]
    }

    pub fn first_layer(&self) -> ArrayGeometry {
        ArrayGeometry {
            positions: self.layer(0).to_vec(),
            layers: 1,
            ..self.clone()
        }
    }

    /// Distance from a transmitter in the z = 0 plane to every element.
    pub fn distances(&self, p: Point2) -> Vec<f64> {
        self.positions
            .iter()
            .map(|e| {
                let dx = p.x - e[0];
                let dy = p.y - e[1];
                (dx * dx + dy * dy + e[2] * e[2]).sqrt()
            })
            .collect()
    }

    /// Same array rotated about the z axis.
    pub fn rotated_xy(&self, angle: f64) -> ArrayGeometry {
        let (s, c) = angle.sin_cos();
        let positions = self
            .positions
            .iter()
            .map(|e| [c * e[0] - s * e[1], s * e[0] + c * e[1], e[2]])
            .collect();
        ArrayGeometry {
            positions,
            ..self.clone()
        }
    }

    pub fn is_near_field(&self, p: Point2) -> bool {
        p.norm() < fraunhofer_distance(self)
    }
}

/// Metasurface stack plus the receiver array behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLayout {
    pub sim: ArrayGeometry,
    pub receiver: ArrayGeometry,
}

impl SimLayout {
    /// First (input) layer of the stack; the steering vectors live here.
    pub fn input(&self) -> ArrayGeometry {
        self.sim.first_layer()
    }

    pub fn tunable_elements(&self) -> usize {
        self.sim.len()
    }
}

/// Build the layer stack and the receiver array described by `cfg`.
///
/// `receivers` is used when `cfg.receivers` is zero.
pub fn build_sim_geometry(cfg: &GeometryConfig, receivers: usize) -> Result<SimLayout> {
    cfg.validate()?;
    let lambda = cfg.wavelength();
    let sim = ArrayGeometry::planar_stack(
        cfg.k_y,
        cfg.k_z,
        cfg.layers,
        cfg.element_spacing_wl * lambda,
        cfg.layer_spacing_wl * lambda,
        lambda,
        0.0,
    );
    let m = if cfg.receivers > 0 { cfg.receivers } else { receivers };
    if m == 0 {
        return Err(Error::config("geometry.receivers", "receiver count must be at least 1"));
    }
    let last_x = (cfg.layers as f64 - 1.0) * cfg.layer_spacing_wl * lambda;
    let receiver = ArrayGeometry::planar_stack(
        m,
        1,
        1,
        cfg.receiver_spacing_wl * lambda,
        0.0,
        lambda,
        last_x + cfg.receiver_offset_wl * lambda,
    );
    Ok(SimLayout { sim, receiver })
}

/// `2 D² / λ`, the boundary of the radiative near field.
pub fn fraunhofer_distance(geometry: &ArrayGeometry) -> f64 {
    2.0 * geometry.aperture * geometry.aperture / geometry.wavelength
}

/// Prior over the transmitter position.
pub trait PositionPrior: Send + Sync {
    /// Draw the `index`-th sample of the stream keyed by `seed`.
    fn sample_at(&self, seed: u64, index: u64) -> Point2;
    fn contains(&self, p: Point2) -> bool;
    /// Axis-aligned bounding box `(min, max)`.
    fn bounds(&self) -> (Point2, Point2);

    fn sample(&self, n: usize, seed: u64) -> Vec<Point2> {
        (0..n as u64).map(|i| self.sample_at(seed, i)).collect()
    }
}

/// Uniform density over a disk in the (x, y) plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformDisk {
    pub center: Point2,
    pub diameter: f64,
}

impl UniformDisk {
    pub fn new(center: Point2, diameter: f64) -> Result<Self> {
        if !(diameter >= 0.0 && diameter.is_finite()) {
            return Err(Error::config("region.diameter", format!("must be non-negative, got {diameter}")));
        }
        if !(center.x > 0.0) {
            return Err(Error::config("region.center_distance", "region center must have x > 0"));
        }
        Ok(UniformDisk { center, diameter })
    }

    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn rotated(&self, angle: f64) -> UniformDisk {
        UniformDisk {
            center: self.center.rotated(angle),
            diameter: self.diameter,
        }
    }
}

impl PositionPrior for UniformDisk {
    fn sample_at(&self, seed: u64, index: u64) -> Point2 {
        let mut rng = stream_rng(seed, index);
        let u: f64 = rng.random();
        let t: f64 = rng.random();
        let r = self.radius() * u.sqrt();
        let phi = 2.0 * PI * t;
        Point2::new(self.center.x + r * phi.cos(), self.center.y + r * phi.sin())
    }

    fn contains(&self, p: Point2) -> bool {
        p.distance(&self.center) <= self.radius() * (1.0 + 1e-12)
    }

    fn bounds(&self) -> (Point2, Point2) {
        let r = self.radius();
        (
            Point2::new(self.center.x - r, self.center.y - r),
            Point2::new(self.center.x + r, self.center.y + r),
        )
    }
}

/// i.i.d. uniform samples from the disk, reproducible from `rng_seed`.
pub fn sample_region(region: &UniformDisk, n: usize, rng_seed: u64) -> Vec<Point2> {
    region.sample(n, rng_seed)
}

/// Log-normal shadowing with a uniformly distributed phase offset.
///
/// `20 log10(G)` is Gaussian with mean `20 log10(mean_gain)` and standard
/// deviation `shadowing_std_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainModel {
    pub shadowing_std_db: f64,
    pub mean_gain: f64,
}

impl Default for GainModel {
    fn default() -> Self {
        GainModel {
            shadowing_std_db: 3.0,
            mean_gain: 1.0,
        }
    }
}

impl GainModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.shadowing_std_db >= 0.0 && self.shadowing_std_db.is_finite()) {
            return Err(Error::config("gain.shadowing_std_db", "must be non-negative"));
        }
        if !(self.mean_gain > 0.0 && self.mean_gain.is_finite()) {
            return Err(Error::config("gain.mean_gain", "must be positive"));
        }
        Ok(())
    }

    fn log_std(&self) -> f64 {
        self.shadowing_std_db * std::f64::consts::LN_10 / 20.0
    }

    /// `σ_G² = E[G²]`.
    pub fn second_moment(&self) -> f64 {
        let s = self.log_std();
        self.mean_gain * self.mean_gain * (2.0 * s * s).exp()
    }

    /// Draw `(G, θ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let s = self.log_std();
        let n = if s > 0.0 {
            Normal::new(0.0, s).expect("finite std").sample(rng)
        } else {
            0.0
        };
        let theta = 2.0 * PI * rng.random::<f64>();
        (self.mean_gain * n.exp(), theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_aperture(g: &ArrayGeometry) -> f64 {
        let layer = g.layer(0);
        let mut best: f64 = 0.0;
        for a in layer {
            for b in layer {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                best = best.max(d);
            }
        }
        best
    }

    #[test]
    fn paper_scale_stack_element_count() {
        let cfg = GeometryConfig {
            k_y: 64,
            k_z: 4,
            layers: 7,
            ..GeometryConfig::default()
        };
        let layout = build_sim_geometry(&cfg, 6).unwrap();
        assert_eq!(layout.tunable_elements(), 1792);
        assert_eq!(layout.receiver.len(), 6);
    }

    #[test]
    fn single_element_at_origin() {
        let cfg = GeometryConfig {
            k_y: 1,
            k_z: 1,
            layers: 1,
            ..GeometryConfig::default()
        };
        let layout = build_sim_geometry(&cfg, 1).unwrap();
        assert_eq!(layout.sim.positions, vec![[0.0, 0.0, 0.0]]);
        assert_eq!(layout.sim.aperture, 0.0);
    }

    #[test]
    fn aperture_matches_brute_force() {
        let cfg = GeometryConfig {
            k_y: 4,
            k_z: 1,
            layers: 2,
            ..GeometryConfig::default()
        };
        let layout = build_sim_geometry(&cfg, 1).unwrap();
        let lambda = cfg.wavelength();
        assert!((layout.sim.aperture - 1.5 * lambda).abs() < 1e-15);
        assert!((brute_force_aperture(&layout.sim) - layout.sim.aperture).abs() < 1e-15);

        let cfg = GeometryConfig {
            k_y: 7,
            k_z: 3,
            ..GeometryConfig::default()
        };
        let layout = build_sim_geometry(&cfg, 1).unwrap();
        assert!((brute_force_aperture(&layout.sim) - layout.sim.aperture).abs() < 1e-15);
    }

    #[test]
    fn layers_offset_along_x() {
        let cfg = GeometryConfig::default();
        let layout = build_sim_geometry(&cfg, 4).unwrap();
        let lambda = cfg.wavelength();
        let k = layout.sim.elements_per_layer();
        for q in 1..cfg.layers {
            for e in 0..k {
                let a = layout.sim.positions[(q - 1) * k + e];
                let b = layout.sim.positions[q * k + e];
                assert!((b[0] - a[0] - 0.5 * lambda).abs() < 1e-15);
                assert_eq!((a[1], a[2]), (b[1], b[2]));
            }
        }
        let last_x = layout.sim.positions.last().unwrap()[0];
        assert!(layout.receiver.positions.iter().all(|r| (r[0] - last_x - cfg.receiver_offset_wl * lambda).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let cfg = GeometryConfig {
            k_y: 0,
            ..GeometryConfig::default()
        };
        assert!(matches!(build_sim_geometry(&cfg, 1), Err(Error::Config { key, .. }) if key == "geometry.k_y"));
        let cfg = GeometryConfig {
            layer_spacing_wl: -1.0,
            ..GeometryConfig::default()
        };
        assert!(build_sim_geometry(&cfg, 1).is_err());
    }

    #[test]
    fn fraunhofer_values() {
        let lambda = 0.01071;
        let mut g = ArrayGeometry::planar_stack(1, 1, 1, 1.0, 1.0, lambda, 0.0);
        g.aperture = lambda;
        assert!((fraunhofer_distance(&g) - 2.0 * lambda).abs() < 1e-15);
        g.aperture = 0.16;
        assert!((fraunhofer_distance(&g) - 4.7805788982).abs() < 1e-6);
        let d1 = fraunhofer_distance(&g);
        g.aperture = 0.32;
        assert!((fraunhofer_distance(&g) - 4.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn region_samples_inside_disk() {
        let region = UniformDisk::new(Point2::new(2.0, 0.5), 0.6).unwrap();
        let pts = sample_region(&region, 10_000, 11);
        assert!(pts.iter().all(|p| p.distance(&region.center) <= 0.3 + 1e-12));
        assert_eq!(pts, sample_region(&region, 10_000, 11));
        assert_ne!(pts, sample_region(&region, 10_000, 12));
    }

    #[test]
    fn degenerate_region_returns_center() {
        let region = UniformDisk::new(Point2::new(1.0, -0.2), 0.0).unwrap();
        assert!(sample_region(&region, 100, 3).iter().all(|p| *p == region.center));
    }

    #[test]
    fn region_moments_match_uniform_disk() {
        // Uniform disk of radius r: E[x] = c, Var[x] = r²/4 per axis.
        let r = 0.3;
        let region = UniformDisk::new(Point2::new(1.0, 0.0), 2.0 * r).unwrap();
        let n = 40_000;
        let pts = sample_region(&region, n, 5);
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / n as f64;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / n as f64;
        let sigma = r / 2.0;
        let tol = 3.0 * sigma / (n as f64).sqrt();
        assert!((mx - 1.0).abs() < tol, "mean x {mx}");
        assert!(my.abs() < tol, "mean y {my}");
        let vx = pts.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / n as f64;
        assert!((vx - sigma * sigma).abs() / (sigma * sigma) < 0.03);
    }

    #[test]
    fn gain_second_moment_monte_carlo() {
        let gains = GainModel {
            shadowing_std_db: 3.0,
            mean_gain: 1.0,
        };
        let mut rng = stream_rng(9, 0);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| gains.sample(&mut rng).0).collect();
        let m2 = draws.iter().map(|g| g * g).sum::<f64>() / n as f64;
        let var = draws.iter().map(|g| (g * g - m2).powi(2)).sum::<f64>() / n as f64;
        assert!((m2 - gains.second_moment()).abs() < 4.0 * (var / n as f64).sqrt());
        let db: Vec<f64> = draws.iter().map(|g| 20.0 * g.log10()).collect();
        let mean = db.iter().sum::<f64>() / n as f64;
        let std = (db.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std - 3.0).abs() < 0.03, "std {std}");
    }

    #[test]
    fn near_field_predicate() {
        let cfg = GeometryConfig {
            k_y: 64,
            k_z: 4,
            layers: 7,
            ..GeometryConfig::default()
        };
        let input = build_sim_geometry(&cfg, 6).unwrap().input();
        for d in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            assert!(input.is_near_field(Point2::from_polar(d, PI / 3.0)));
        }
        assert!(!input.is_near_field(Point2::new(100.0, 0.0)));
    }
}
