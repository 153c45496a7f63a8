//! Multiport impedance model of the stacked metasurface.
//!
//! Every cell `(q, k)` is a pair of antennas (input side facing the previous
//! layer, output side facing the next) joined by a tunable reactive load. The
//! 2QK ports interact through a static, reciprocal impedance matrix `Z_SS`; the
//! loads form the diagonal `Z_S(η)`. The end-to-end map from the first-layer
//! excitations to the receivers is `V = C_out (Z_SS + Z_S(η))⁻¹ E_in`.
//!
//! Port numbering: port `2 (q K + k) + side` with `side = 0` for input and
//! `side = 1` for output. Phase vectors `η` use index `q K + k`.

use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::{Dyn, LU};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, SimLayout};
use crate::linalg::{c64, spectral_norm, symmetric_condition_estimate, symmetry_defect, CMat, C64};
use crate::matio;

/// Condition-number estimate above which the total impedance is rejected.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortSide {
    Input = 0,
    Output = 1,
}

/// Mapping between `(layer, element, side)` and port indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortLayout {
    pub layers: usize,
    pub elements: usize,
}

impl PortLayout {
    pub fn new(layers: usize, elements: usize) -> Self {
        PortLayout { layers, elements }
    }

    pub fn cells(&self) -> usize {
        self.layers * self.elements
    }

    pub fn ports(&self) -> usize {
        2 * self.cells()
    }

    pub fn cell(&self, layer: usize, element: usize) -> usize {
        debug_assert!(layer < self.layers && element < self.elements);
        layer * self.elements + element
    }

    pub fn port(&self, layer: usize, element: usize, side: PortSide) -> usize {
        2 * self.cell(layer, element) + side as usize
    }

    /// Inverse of [`PortLayout::port`].
    pub fn locate(&self, port: usize) -> (usize, usize, PortSide) {
        let cell = port / 2;
        let side = if port % 2 == 0 { PortSide::Input } else { PortSide::Output };
        (cell / self.elements, cell % self.elements, side)
    }

    pub fn input_ports(&self) -> Vec<usize> {
        (0..self.elements).map(|k| self.port(0, k, PortSide::Input)).collect()
    }
}

/// Parameters of the closed-form coupling model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticImpedance {
    /// Self impedance `[re, im]` in ohms.
    pub z_self: [f64; 2],
    /// Mutual coupling strength between distinct cells.
    pub beta: f64,
    /// Coupling `[re, im]` between the two ports of one cell.
    pub gamma: [f64; 2],
    /// Separation between a cell's input and output antennas, in wavelengths.
    pub cell_depth_wl: f64,
    /// Load reactance scale: `X(η) = x0 · tan(η / 2)`.
    pub x0: f64,
}

impl Default for AnalyticImpedance {
    fn default() -> Self {
        AnalyticImpedance {
            z_self: [73.0, 42.5],
            beta: 250.0,
            gamma: [80.0, 0.0],
            cell_depth_wl: 0.25,
            x0: 50.0,
        }
    }
}

impl AnalyticImpedance {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_self[0] > 0.0) || !self.z_self[1].is_finite() {
            return Err(Error::config("impedance.z_self", "real part must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("impedance.beta", "must be finite and nonnegative"));
        }
        if !(self.gamma[0].is_finite() && self.gamma[1].is_finite()) {
            return Err(Error::config("impedance.gamma", "must be finite"));
        }
        if !(self.cell_depth_wl > 0.0 && self.cell_depth_wl.is_finite()) {
            return Err(Error::config("impedance.cell_depth_wl", "must be positive"));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(Error::config("impedance.x0", "must be positive"));
        }
        Ok(())
    }

    pub fn z_self(&self) -> C64 {
        c64(self.z_self[0], self.z_self[1])
    }

    pub fn gamma(&self) -> C64 {
        c64(self.gamma[0], self.gamma[1])
    }

    /// `m(d) = β e^{-j 2π d/λ} / (2π d/λ)`.
    pub fn mutual(&self, d: f64, wavelength: f64) -> C64 {
        let kd = 2.0 * PI * d / wavelength;
        let (s, c) = (-kd).sin_cos();
        c64(c, s) * (self.beta / kd)
    }
}

/// Source of the static impedance matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum ImpedanceProvider {
    Analytic(AnalyticImpedance),
    /// Full `Z_SS` in the shared matrix text format, with the load scale `x0`
    /// and cell depth used for the receiver coupling.
    File { path: PathBuf, model: AnalyticImpedance },
}

impl ImpedanceProvider {
    pub fn model(&self) -> &AnalyticImpedance {
        match self {
            ImpedanceProvider::Analytic(m) => m,
            ImpedanceProvider::File { model, .. } => model,
        }
    }
}

/// Physical port positions, indexed like the ports.
pub fn port_positions(sim: &ArrayGeometry, cell_depth: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(2 * sim.len());
    for e in &sim.positions {
        out.push([e[0] - 0.5 * cell_depth, e[1], e[2]]);
        out.push([e[0] + 0.5 * cell_depth, e[1], e[2]]);
    }
    out
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Static impedance matrix `Z_SS` for the given layout.
pub fn build_impedance(provider: &ImpedanceProvider, layout: &SimLayout) -> Result<CMat> {
    let ports = PortLayout::new(layout.sim.layers, layout.sim.elements_per_layer());
    let n = ports.ports();
    match provider {
        ImpedanceProvider::Analytic(model) => {
            model.validate()?;
            let lambda = layout.sim.wavelength;
            let pos = port_positions(&layout.sim, model.cell_depth_wl * lambda);
            let mut z = CMat::zeros(n, n);
            for i in 0..n {
                z[(i, i)] = model.z_self();
                for j in (i + 1)..n {
                    let v = if i / 2 == j / 2 {
                        model.gamma()
                    } else if model.beta == 0.0 {
                        C64::new(0.0, 0.0)
                    } else {
                        let d = dist(&pos[i], &pos[j]);
                        if d == 0.0 {
                            return Err(Error::GeometricSingularity { element: j });
                        }
                        model.mutual(d, lambda)
                    };
                    z[(i, j)] = v;
                    z[(j, i)] = v;
                }
            }
            Ok(z)
        }
        ImpedanceProvider::File { path, model } => {
            model.validate()?;
            let z = matio::read_cmatrix(path)?;
            if z.nrows() != n || z.ncols() != n {
                return Err(Error::dimension("impedance file", format!("{n}x{n}"), format!("{}x{}", z.nrows(), z.ncols())));
            }
            check_static_impedance(&z)?;
            Ok(z)
        }
    }
}

fn check_static_impedance(z: &CMat) -> Result<()> {
    let defect = symmetry_defect(z);
    if defect > 1e-12 {
        return Err(Error::Validation(format!(
            "impedance matrix is not complex symmetric (relative defect {defect:e})"
        )));
    }
    if let Some(i) = (0..z.nrows()).find(|&i| !(z[(i, i)].re > 0.0)) {
        return Err(Error::Validation(format!("impedance diagonal entry {i} has nonpositive real part")));
    }
    Ok(())
}

/// Receiver coupling `C_out`: analytic mutual terms from each receiver to the
/// last layer's output ports, zero elsewhere.
pub fn build_output_coupling(layout: &SimLayout, model: &AnalyticImpedance) -> Result<CMat> {
    model.validate()?;
    let ports = PortLayout::new(layout.sim.layers, layout.sim.elements_per_layer());
    let lambda = layout.sim.wavelength;
    let pos = port_positions(&layout.sim, model.cell_depth_wl * lambda);
    let m = layout.receiver.len();
    let mut c = CMat::zeros(m, ports.ports());
    let last = ports.layers - 1;
    for (r, rx) in layout.receiver.positions.iter().enumerate() {
        for k in 0..ports.elements {
            let p = ports.port(last, k, PortSide::Output);
            let d = dist(rx, &pos[p]);
            if d == 0.0 {
                return Err(Error::GeometricSingularity { element: p });
            }
            c[(r, p)] = model.mutual(d, lambda);
        }
    }
    Ok(c)
}

/// Load reactance `X(η) = x0 tan(η/2)`.
pub fn load_reactance(x0: f64, eta: f64) -> f64 {
    x0 * (0.5 * eta).tan()
}

/// `dX/dη = x0 / (2 cos²(η/2))`.
pub fn load_reactance_derivative(x0: f64, eta: f64) -> f64 {
    let c = (0.5 * eta).cos();
    x0 / (2.0 * c * c)
}

/// Wrap a phase into `(-π, π]`.
pub fn wrap_phase(eta: f64) -> f64 {
    let mut w = eta.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// The full network: static impedance, loads, couplings and current phases.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    pub z_ss: CMat,
    pub c_out: CMat,
    /// Ports driven by the first-layer excitations (columns of `E_in`).
    pub input_ports: Vec<usize>,
    pub ports: PortLayout,
    pub eta: Vec<f64>,
    pub x0: f64,
    pub condition_limit: f64,
}

impl SimNetwork {
    pub fn new(z_ss: CMat, c_out: CMat, ports: PortLayout, x0: f64) -> Result<Self> {
        let n = ports.ports();
        if z_ss.nrows() != n || z_ss.ncols() != n {
            return Err(Error::dimension("Z_SS", format!("{n}x{n}"), format!("{}x{}", z_ss.nrows(), z_ss.ncols())));
        }
        if c_out.ncols() != n {
            return Err(Error::dimension("C_out columns", n, c_out.ncols()));
        }
        let defect = symmetry_defect(&z_ss);
        if defect > 1e-12 {
            return Err(Error::Validation(format!("Z_SS is not complex symmetric (relative defect {defect:e})")));
        }
        if !(x0 > 0.0) {
            return Err(Error::config("impedance.x0", "must be positive"));
        }
        Ok(SimNetwork {
            z_ss,
            c_out,
            input_ports: ports.input_ports(),
            ports,
            eta: vec![0.0; ports.cells()],
            x0,
            condition_limit: DEFAULT_CONDITION_LIMIT,
        })
    }

    /// Network for a SIM layout with the given provider.
    pub fn from_layout(layout: &SimLayout, provider: &ImpedanceProvider) -> Result<Self> {
        let z = build_impedance(provider, layout)?;
        let c = build_output_coupling(layout, provider.model())?;
        let ports = PortLayout::new(layout.sim.layers, layout.sim.elements_per_layer());
        SimNetwork::new(z, c, ports, provider.model().x0)
    }

    pub fn inputs(&self) -> usize {
        self.input_ports.len()
    }

    pub fn outputs(&self) -> usize {
        self.c_out.nrows()
    }

    pub fn set_eta(&mut self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.ports.cells() {
            return Err(Error::dimension("eta", self.ports.cells(), eta.len()));
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numerical("eta contains non-finite values".into()));
        }
        self.eta = eta.iter().map(|&e| wrap_phase(e)).collect();
        Ok(())
    }

    /// Diagonal of `Z_S(η)`, one entry per port (purely imaginary).
    pub fn loads(&self, eta: &[f64]) -> Vec<C64> {
        eta.iter()
            .flat_map(|&e| {
                let x = c64(0.0, load_reactance(self.x0, e));
                [x, x]
            })
            .collect()
    }

    pub fn total_impedance(&self, eta: &[f64]) -> CMat {
        let mut z = self.z_ss.clone();
        for (i, l) in self.loads(eta).into_iter().enumerate() {
            z[(i, i)] += l;
        }
        z
    }

    /// Explicit `E_in` (tests and export only).
    pub fn injection_matrix(&self) -> CMat {
        let mut e = CMat::zeros(self.ports.ports(), self.inputs());
        for (k, &p) in self.input_ports.iter().enumerate() {
            e[(p, k)] = c64(1.0, 0.0);
        }
        e
    }

    /// Factorize `Z_SS + Z_S(η)` at the stored phases.
    pub fn transfer(&self) -> Result<Transfer> {
        self.transfer_at(&self.eta)
    }

    pub fn transfer_at(&self, eta: &[f64]) -> Result<Transfer> {
        if eta.len() != self.ports.cells() {
            return Err(Error::dimension("eta", self.ports.cells(), eta.len()));
        }
        let z = self.total_impedance(eta);
        let conditioning = |condition: f64| Error::Conditioning {
            context: "total impedance Z_SS + Z_S(eta)".into(),
            condition,
            eta: Some(eta.to_vec()),
        };
        if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(conditioning(f64::INFINITY));
        }
        let lu = z.clone().lu();
        if !lu.is_invertible() {
            return Err(conditioning(f64::INFINITY));
        }
        let condition = symmetric_condition_estimate(&z, &lu);
        if !(condition <= self.condition_limit) {
            return Err(conditioning(condition));
        }
        Ok(Transfer { lu, condition })
    }

    /// `V(η) = C_out T(η) E_in` at the stored phases.
    pub fn effective_projection(&self) -> Result<CMat> {
        let t = self.transfer()?;
        Ok(self.projection_with(&t))
    }

    pub fn projection_with(&self, t: &Transfer) -> CMat {
        let p = t.solve_columns(&self.input_ports, self.ports.ports());
        &self.c_out * p
    }

    /// Same projection via reciprocity: solve for `C_out^T` and read the input rows.
    pub fn projection_by_rows(&self, t: &Transfer) -> CMat {
        let q = t.solve(&self.c_out.transpose());
        let mut v = CMat::zeros(self.outputs(), self.inputs());
        for (k, &p) in self.input_ports.iter().enumerate() {
            for m in 0..self.outputs() {
                v[(m, k)] = q[(p, m)];
            }
        }
        v
    }
}

/// Cached factorization of the total impedance.
pub struct Transfer {
    lu: LU<C64, Dyn, Dyn>,
    /// Estimated 1-norm condition number.
    pub condition: f64,
}

impl Transfer {
    /// `T B` for an arbitrary right-hand side.
    pub fn solve(&self, b: &CMat) -> CMat {
        // Columns are independent; solve them in parallel against the shared factors.
        let cols: Vec<_> = (0..b.ncols())
            .into_par_iter()
            .map(|j| {
                let col = b.column(j).into_owned();
                self.lu.solve(&col).expect("factorization checked invertible")
            })
            .collect();
        CMat::from_columns(&cols)
    }

    /// `T E` where `E` selects the listed unit columns.
    pub fn solve_columns(&self, ports: &[usize], n: usize) -> CMat {
        let cols: Vec<_> = ports
            .par_iter()
            .map(|&p| {
                let mut e = nalgebra::DVector::<C64>::zeros(n);
                e[p] = c64(1.0, 0.0);
                self.lu.solve(&e).expect("factorization checked invertible")
            })
            .collect();
        CMat::from_columns(&cols)
    }

    /// Dense `T` (tests only).
    pub fn materialize(&self) -> CMat {
        self.lu.try_inverse().expect("factorization checked invertible")
    }
}

/// Realized projection and its mismatch against an optional target.
#[derive(Debug, Clone)]
pub struct Projection {
    pub v: CMat,
    pub target: Option<CMat>,
    pub delta_rel: f64,
    pub delta_u: f64,
}

impl Projection {
    /// Wrap `V`; with `u` given, the target is `U^H` and the deltas use the
    /// definitions in [`crate::bounds::mismatch_metrics`].
    pub fn new(v: CMat, u: Option<&CMat>) -> Result<Self> {
        match u {
            None => Ok(Projection {
                v,
                target: None,
                delta_rel: 0.0,
                delta_u: 0.0,
            }),
            Some(u) => {
                let m = crate::bounds::mismatch_metrics(&v, u)?;
                Ok(Projection {
                    v,
                    target: Some(u.adjoint()),
                    delta_rel: m.delta_rel,
                    delta_u: m.delta_u,
                })
            }
        }
    }
}

/// `‖V V^H − I‖₂`.
pub fn row_orthonormality_gap(v: &CMat) -> f64 {
    let g = v * v.adjoint() - CMat::identity(v.nrows(), v.nrows());
    spectral_norm(&g)
}
