//! Dense complex linear-algebra helpers on top of `nalgebra`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn real(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Eigenpairs of a Hermitian matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Unitary matrix whose columns are the eigenvectors matching `values`.
    pub vectors: CMat,
}

/// Hermitian eigendecomposition with a deterministic output.
///
/// Each eigenvector is phase-normalized so that its first non-negligible entry
/// is real and positive. Eigenvalues are sorted in descending order; values that
/// agree within `1e-12 * max|λ|` are treated as ties and ordered by a
/// lexicographic comparison of their normalized eigenvectors.
pub fn hermitian_eigen(m: &CMat) -> HermitianEigen {
    assert!(m.is_square(), "hermitian_eigen needs a square matrix");
    let n = m.nrows();
    // Symmetrize to remove rounding asymmetry before handing to the solver.
    let herm = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(herm);
    let mut cols: Vec<(f64, DVector<C64>)> = (0..n)
        .map(|j| {
            let mut v = eig.eigenvectors.column(j).into_owned();
            normalize_phase(&mut v);
            (eig.eigenvalues[j], v)
        })
        .collect();

    let scale = cols.iter().map(|(l, _)| l.abs()).fold(0.0, f64::max);
    let tie = 1e-12 * scale.max(f64::MIN_POSITIVE);
    cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    // Reorder runs of tied eigenvalues.
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (cols[start].0 - cols[end].0).abs() <= tie {
            end += 1;
        }
        if end - start > 1 {
            cols[start..end].sort_by(|a, b| lexicographic(&a.1, &b.1));
        }
        start = end;
    }

    let values = cols.iter().map(|(l, _)| *l).collect();
    let mut vectors = CMat::zeros(n, n);
    for (j, (_, v)) in cols.iter().enumerate() {
        vectors.set_column(j, v);
    }
    HermitianEigen { values, vectors }
}

fn normalize_phase(v: &mut DVector<C64>) {
    let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|z| z.norm() > 1e-8 * peak).copied() {
        let rot = first.conj() / first.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

fn lexicographic(a: &DVector<C64>, b: &DVector<C64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.re.partial_cmp(&y.re) {
            Some(Ordering::Equal) | None => {}
            Some(o) => return o,
        }
        match x.im.partial_cmp(&y.im) {
            Some(Ordering::Equal) | None => {}
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Largest singular value.
pub fn spectral_norm(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let svd = SVD::new(m.clone(), false, false);
    svd.singular_values.iter().cloned().fold(0.0, f64::max)
}

pub fn singular_values(m: &CMat) -> Vec<f64> {
    let svd = SVD::new(m.clone(), false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    s
}

pub fn trace_re(m: &CMat) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

/// Max entrywise deviation from Hermitian symmetry relative to the largest entry.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let peak = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max) / peak
}

/// Max entrywise deviation from complex symmetry (`m == m^T`), relative.
pub fn symmetry_defect(m: &CMat) -> f64 {
    let peak = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).iter().map(|z| z.norm()).fold(0.0, f64::max) / peak
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn hpd_inverse(m: &CMat, context: &'static str) -> Result<CMat> {
    let herm = (m + m.adjoint()).scale(0.5);
    herm.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{context}: matrix is not positive definite")))
}

/// Solve `m x = b` for Hermitian positive-definite `m`.
pub fn hpd_solve(m: &CMat, b: &CMat, context: &'static str) -> Result<CMat> {
    let herm = (m + m.adjoint()).scale(0.5);
    herm.cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| Error::Numerical(format!("{context}: matrix is not positive definite")))
}

/// Moore-Penrose pseudo-inverse of a Hermitian matrix. Eigenvalues below
/// `rel_tol * max|λ|` are discarded; the flag reports whether any were.
pub fn hermitian_pinv(m: &CMat, rel_tol: f64) -> (CMat, bool) {
    let eig = hermitian_eigen(m);
    let peak = eig.values.iter().map(|l| l.abs()).fold(0.0, f64::max);
    let n = m.nrows();
    let mut out = CMat::zeros(n, n);
    let mut truncated = false;
    for (j, &l) in eig.values.iter().enumerate() {
        if l.abs() <= rel_tol * peak || l == 0.0 {
            truncated = true;
            continue;
        }
        let v = eig.vectors.column(j);
        out += (&v * v.adjoint()).scale(1.0 / l);
    }
    (out, truncated)
}

/// `(M M^H)^{-1/2} M`: rows of `m` made orthonormal with the smallest change.
pub fn orthonormalize_rows(m: &CMat) -> Result<CMat> {
    let gram = m * m.adjoint();
    let eig = hermitian_eigen(&gram);
    let mut inv_sqrt = CMat::zeros(gram.nrows(), gram.ncols());
    for (j, &l) in eig.values.iter().enumerate() {
        if l <= 0.0 {
            return Err(Error::Numerical("rows are linearly dependent".into()));
        }
        let v = eig.vectors.column(j);
        inv_sqrt += (&v * v.adjoint()).scale(1.0 / l.sqrt());
    }
    Ok(inv_sqrt * m)
}

pub fn one_norm(m: &CMat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Estimate of the 1-norm condition number `‖A‖₁‖A⁻¹‖₁` of a complex
/// symmetric matrix `A` from its LU factorization (Hager/Higham iteration).
///
/// Symmetry lets the adjoint solve reuse the same factors:
/// `A^H w = ξ  ⇔  A conj(w) = conj(ξ)`.
pub fn symmetric_condition_estimate(a: &CMat, lu: &LU<C64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let anorm = one_norm(a);
    let mut x = CVec::from_element(n, real(1.0 / n as f64));
    let mut est = 0.0;
    let mut last_j = usize::MAX;
    for _ in 0..5 {
        let y = match lu.solve(&x) {
            Some(y) => y,
            None => return f64::INFINITY,
        };
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return f64::INFINITY;
        }
        est = y.iter().map(|z| z.norm()).sum::<f64>();
        let xi = y.map(|z| if z.norm() > 0.0 { z / z.norm() } else { real(1.0) });
        let w = match lu.solve(&xi.map(|z| z.conj())) {
            Some(w) => w.map(|z| z.conj()),
            None => return f64::INFINITY,
        };
        let (j, zmax) = w
            .iter()
            .enumerate()
            .map(|(i, z)| (i, z.norm()))
            .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        let zx = w.dotc(&x).re;
        if zmax <= zx || j == last_j {
            break;
        }
        last_j = j;
        x = CVec::zeros(n);
        x[j] = real(1.0);
    }
    anorm * est
}
