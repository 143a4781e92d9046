//! Plane-wave Galerkin discretization of the shifted cell operator
//! `(∇+iα)·A(∇+iα) + V` on the truncated Fourier basis `|j|_∞ ≤ J`.
//!
//! `H[j,j'] = (α+j)ᵀ Â(j-j') (α+j') + V̂(j-j')` is a quadratic polynomial in
//! `α`, so the same formula serves real and complex quasi-momenta.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::medium::{key2, FourierIndex, MediumSpec};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Relative eigenvalue gap below which bands are treated as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;
/// Pivot threshold (relative to `‖H‖`) for singular shifted systems.
pub const SINGULAR_PIVOT: f64 = 1e-12;
/// Margin (relative to `‖H‖`) required by [`pole_free_check`].
pub const POLE_FREE_MARGIN: f64 = 1e-8;

/// Medium tables arranged for fast assembly at many `α`.
#[derive(Debug, Clone)]
pub struct CellModel {
    pub dim: usize,
    pub index: Arc<FourierIndex>,
    a_terms: Vec<([i32; 2], [[C64; 2]; 2])>,
    v_terms: Vec<([i32; 2], C64)>,
    diagonal: bool,
    /// Set when the truncation is narrower than the coefficient tables.
    pub truncation_warning: Option<String>,
}

/// Matrix storage: media with only zero-frequency coefficients give diagonal matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum Entries {
    Diagonal(Vec<C64>),
    Dense(DMatrix<C64>),
}

/// Discrete cell operator at one quasi-momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct BlochMatrix {
    pub alpha: Vec<C64>,
    pub j_max: usize,
    pub index: Arc<FourierIndex>,
    pub entries: Entries,
    pub warnings: Vec<String>,
}

/// One band at a real quasi-momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEigen {
    /// 1-based position in ascending order.
    pub band_index: usize,
    pub mu: f64,
    /// Unit coefficient vector of the periodic part of the Bloch function.
    pub coeffs: Vec<C64>,
    /// Size of the eigenvalue cluster containing this band.
    pub multiplicity: usize,
}

impl BandEigen {
    pub fn is_simple(&self) -> bool {
        self.multiplicity == 1
    }
}

/// Outcome of [`pole_free_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleCheck {
    pub pass: bool,
    pub margin: f64,
}

/// Eigen-triple continued to complex `α`.
#[derive(Debug, Clone)]
pub struct ComplexEigen {
    pub mu: C64,
    pub right: Vec<C64>,
    pub left: Vec<C64>,
}

impl ComplexEigen {
    /// Spectral projection coefficient `y†g / y†x`; reduces to the real-`α`
    /// coefficient `Σ g_k conj(c_k)` when `x = y` is a unit vector.
    pub fn source_coeff(&self, g: &[C64]) -> C64 {
        cdot(&self.left, g) / cdot(&self.left, &self.right)
    }
}

fn to2(alpha: &[C64]) -> [C64; 2] {
    [alpha[0], if alpha.len() > 1 { alpha[1] } else { ZERO }]
}

impl CellModel {
    pub fn new(medium: &MediumSpec, j_max: usize) -> Result<Self> {
        if j_max < 1 {
            return Err(LapError::InvalidInput("truncation J_max must be at least 1".into()));
        }
        let dim = medium.dim;
        let index = Arc::new(FourierIndex::new(dim, j_max));
        let a_terms: Vec<_> = medium
            .a_coeffs
            .iter()
            .filter(|(_, m)| m.iter().any(|z| z.norm() > 0.0))
            .map(|(j, m)| {
                let mut a = [[ZERO; 2]; 2];
                for r in 0..dim {
                    for c in 0..dim {
                        a[r][c] = m[r * dim + c];
                    }
                }
                (key2(j), a)
            })
            .collect();
        let v_terms: Vec<_> = medium
            .v_coeffs
            .iter()
            .filter(|(_, z)| z.norm() > 0.0)
            .map(|(j, z)| (key2(j), *z))
            .collect();
        let diagonal = a_terms.iter().all(|(j, _)| *j == [0, 0]) && v_terms.iter().all(|(j, _)| *j == [0, 0]);
        let support = medium.support_radius();
        let truncation_warning = (j_max < support).then(|| {
            format!("truncation J_max={j_max} is smaller than the coefficient support {support}")
        });
        Ok(Self {
            dim,
            index,
            a_terms,
            v_terms,
            diagonal,
            truncation_warning,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn j_max(&self) -> usize {
        self.index.j_max
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    fn shifted(&self, alpha: &[C64; 2], j: [i32; 2]) -> [C64; 2] {
        [alpha[0] + j[0] as f64, alpha[1] + j[1] as f64]
    }

    fn quad(&self, a: &[[C64; 2]; 2], u: &[C64; 2], w: &[C64; 2]) -> C64 {
        let mut s = ZERO;
        for r in 0..self.dim {
            for c in 0..self.dim {
                s += u[r] * a[r][c] * w[c];
            }
        }
        s
    }

    fn diag_values(&self, alpha: &[C64; 2]) -> Vec<C64> {
        let (a0, v0) = self.zero_terms();
        self.index
            .list
            .iter()
            .map(|j| {
                let u = self.shifted(alpha, *j);
                self.quad(&a0, &u, &u) + v0
            })
            .collect()
    }

    fn zero_terms(&self) -> ([[C64; 2]; 2], C64) {
        let a0 = self
            .a_terms
            .iter()
            .find(|(j, _)| *j == [0, 0])
            .map(|(_, a)| *a)
            .unwrap_or([[ZERO; 2]; 2]);
        let v0 = self
            .v_terms
            .iter()
            .find(|(j, _)| *j == [0, 0])
            .map(|(_, v)| *v)
            .unwrap_or(ZERO);
        (a0, v0)
    }

    /// Entry rule evaluated at `α` (complex allowed).
    pub fn assemble(&self, alpha: &[C64]) -> BlochMatrix {
        let a = to2(alpha);
        let entries = if self.diagonal {
            Entries::Diagonal(self.diag_values(&a))
        } else {
            let n = self.len();
            let mut h = DMatrix::<C64>::zeros(n, n);
            for (p, jp) in self.index.list.iter().enumerate() {
                let up = self.shifted(&a, *jp);
                for (d, am) in &self.a_terms {
                    if let Some(q) = self.index.position([jp[0] - d[0], jp[1] - d[1]]) {
                        let uq = self.shifted(&a, self.index.list[q]);
                        h[(p, q)] += self.quad(am, &up, &uq);
                    }
                }
                for (d, v) in &self.v_terms {
                    if let Some(q) = self.index.position([jp[0] - d[0], jp[1] - d[1]]) {
                        h[(p, q)] += *v;
                    }
                }
            }
            Entries::Dense(h)
        };
        BlochMatrix {
            alpha: alpha.to_vec(),
            j_max: self.j_max(),
            index: self.index.clone(),
            entries,
            warnings: self.truncation_warning.iter().cloned().collect(),
        }
    }

    /// `(Σ_k dir_k ∂H/∂α_k) v` at `α`.
    pub fn grad_apply(&self, alpha: &[C64], dir: &[C64], v: &[C64]) -> Vec<C64> {
        let a = to2(alpha);
        let dir2 = to2(dir);
        let n = self.len();
        let mut out = vec![ZERO; n];
        // ∂_k H[p,q] = Σ_l Â_kl(d)(α+j_q)_l + Σ_l Â_lk(d)(α+j_p)_l
        let apply = |am: &[[C64; 2]; 2], up: &[C64; 2], uq: &[C64; 2]| -> C64 {
            let mut s = ZERO;
            for k in 0..self.dim {
                for l in 0..self.dim {
                    s += dir2[k] * (am[k][l] * uq[l] + am[l][k] * up[l]);
                }
            }
            s
        };
        for (p, jp) in self.index.list.iter().enumerate() {
            let up = self.shifted(&a, *jp);
            for (d, am) in &self.a_terms {
                if let Some(q) = self.index.position([jp[0] - d[0], jp[1] - d[1]]) {
                    let uq = self.shifted(&a, self.index.list[q]);
                    out[p] += apply(am, &up, &uq) * v[q];
                }
            }
        }
        out
    }

    /// `H(α) v` without forming the matrix.
    pub fn h_apply(&self, alpha: &[C64], v: &[C64]) -> Vec<C64> {
        let a = to2(alpha);
        let n = self.len();
        let mut out = vec![ZERO; n];
        for (p, jp) in self.index.list.iter().enumerate() {
            let up = self.shifted(&a, *jp);
            for (d, am) in &self.a_terms {
                if let Some(q) = self.index.position([jp[0] - d[0], jp[1] - d[1]]) {
                    let uq = self.shifted(&a, self.index.list[q]);
                    out[p] += self.quad(am, &up, &uq) * v[q];
                }
            }
            for (d, val) in &self.v_terms {
                if let Some(q) = self.index.position([jp[0] - d[0], jp[1] - d[1]]) {
                    out[p] += *val * v[q];
                }
            }
        }
        out
    }

    /// Shifted solve `(H(α) - shift) c = g` with the pivot and residual checks
    /// of [`solve_cell`].
    pub fn solve(&self, alpha: &[C64], shift: C64, g: &[C64]) -> Result<Vec<C64>> {
        if self.diagonal {
            return self.solve_diagonal(alpha, shift, g);
        }
        let h = self.assemble(alpha);
        solve_matrix(&h, shift, g)
    }

    /// Same checks as [`solve_matrix`] without building the matrix.
    fn solve_diagonal(&self, alpha: &[C64], shift: C64, g: &[C64]) -> Result<Vec<C64>> {
        let a = to2(alpha);
        let (a0, v0) = self.zero_terms();
        let c00 = a0[0][0];
        let c01 = a0[0][1] + a0[1][0];
        let c11 = a0[1][1];
        let mut out = Vec::with_capacity(g.len());
        let mut max_d = 0.0f64;
        let mut min_p = f64::INFINITY;
        for (j, gv) in self.index.list.iter().zip(g) {
            let u0 = a[0] + j[0] as f64;
            let d = if self.dim == 1 {
                c00 * u0 * u0 + v0
            } else {
                let u1 = a[1] + j[1] as f64;
                (c00 * u0 + c01 * u1) * u0 + c11 * u1 * u1 + v0
            };
            let p = d - shift;
            let pn = p.norm_sqr();
            max_d = max_d.max(d.norm_sqr());
            min_p = min_p.min(pn);
            let q = gv * p.conj();
            out.push(C64::new(q.re / pn, q.im / pn));
        }
        let scale = max_d.sqrt().max(f64::MIN_POSITIVE);
        let min_p = min_p.sqrt();
        if min_p < SINGULAR_PIVOT * scale {
            return Err(pole_error(&self.assemble(alpha), min_p / scale));
        }
        Ok(out)
    }
}

impl BlochMatrix {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match &self.entries {
            Entries::Dense(h) => h.clone(),
            Entries::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
        }
    }

    /// Maximum absolute row sum.
    pub fn norm(&self) -> f64 {
        match &self.entries {
            Entries::Diagonal(d) => d.iter().map(|z| z.norm()).fold(0.0, f64::max),
            Entries::Dense(h) => h
                .row_iter()
                .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }

    /// `max |H - H*|`.
    pub fn hermiticity_defect(&self) -> f64 {
        match &self.entries {
            Entries::Diagonal(d) => d.iter().map(|z| 2.0 * z.im.abs()).fold(0.0, f64::max),
            Entries::Dense(h) => (h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max),
        }
    }

    pub fn is_real_alpha(&self) -> bool {
        self.alpha.iter().all(|a| a.im == 0.0)
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        match &self.entries {
            Entries::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            Entries::Dense(h) => (h * DVector::from_column_slice(v)).as_slice().to_vec(),
        }
    }
}

/// Builds the cell matrix for a medium at `α`.
pub fn assemble(medium: &MediumSpec, alpha: &[C64], j_max: usize) -> Result<BlochMatrix> {
    Ok(CellModel::new(medium, j_max)?.assemble(alpha))
}

/// The `num_bands` smallest eigenpairs, ascending, at real `α`.
pub fn eigensolve(h: &BlochMatrix, num_bands: usize) -> Result<Vec<BandEigen>> {
    if !h.is_real_alpha() {
        return Err(LapError::Unsupported(
            "eigensolve requires real alpha; use solve_cell or pole_free_check".into(),
        ));
    }
    let n = h.len();
    let count = num_bands.min(n);
    let scale = h.norm().max(1.0);
    let (values, vectors): (Vec<f64>, Box<dyn Fn(usize) -> Vec<C64>>) = match &h.entries {
        Entries::Diagonal(d) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| d[*a].re.total_cmp(&d[*b].re).then(a.cmp(b)));
            let vals = order.iter().map(|i| d[*i].re).collect();
            (
                vals,
                Box::new(move |k| {
                    let mut v = vec![ZERO; n];
                    v[order[k]] = C64::new(1.0, 0.0);
                    v
                }),
            )
        }
        Entries::Dense(m) => {
            let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
            let eig = herm.symmetric_eigen();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
            let vals = order.iter().map(|i| eig.eigenvalues[*i]).collect();
            let vecs = eig.eigenvectors;
            (
                vals,
                Box::new(move |k| {
                    let col = vecs.column(order[k]);
                    // fix the gauge: largest component real and positive
                    let (imax, _) = col
                        .iter()
                        .enumerate()
                        .fold((0, -1.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
                    let ph = col[imax].conj() / col[imax].norm();
                    col.iter().map(|z| z * ph).collect()
                }),
            )
        }
    };
    let tol = DEGENERACY_GAP * scale;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut lo = k;
        while lo > 0 && values[lo] - values[lo - 1] <= tol {
            lo -= 1;
        }
        let mut hi = k;
        while hi + 1 < n && values[hi + 1] - values[hi] <= tol {
            hi += 1;
        }
        out.push(BandEigen {
            band_index: k + 1,
            mu: values[k],
            coeffs: vectors(k),
            multiplicity: hi - lo + 1,
        });
    }
    Ok(out)
}

/// Hellmann–Feynman gradient `∇μ = c* (∇_α H) c` of a simple band at real `α`.
pub fn hf_gradient(model: &CellModel, alpha: &[f64], band: &BandEigen) -> Result<Vec<f64>> {
    if !band.is_simple() {
        return Err(LapError::DegenerateBand {
            band: band.band_index,
            alpha: alpha.to_vec(),
            gap: 0.0,
        });
    }
    Ok(band_gradient(model, alpha, &band.coeffs))
}

/// `c* (∇_α H) c` without the simplicity check; meaningful along an analytic
/// branch whose eigenvector is `c`.
pub fn band_gradient(model: &CellModel, alpha: &[f64], coeffs: &[C64]) -> Vec<f64> {
    let a: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
    (0..model.dim)
        .map(|k| {
            let mut dir = vec![ZERO; model.dim];
            dir[k] = C64::new(1.0, 0.0);
            let hv = model.grad_apply(&a, &dir, coeffs);
            cdot(coeffs, &hv).re
        })
        .collect()
}

/// `f̂ = Σ_k g_k conj(c_k)`.
pub fn eigen_source_coeff(band: &BandEigen, g: &[C64]) -> C64 {
    cdot(&band.coeffs, g)
}

/// `Σ conj(a_k) b_k`.
pub fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn vnorm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Solves `(H(α) - shift) c = g`.
///
/// Fails with a pole-proximity error when the smallest LU pivot is below
/// `1e-12 ‖H‖`; the residual is driven below `1e-10 ‖g‖` by iterative refinement.
pub fn solve_cell(model: &CellModel, alpha: &[C64], shift: C64, g: &[C64]) -> Result<Vec<C64>> {
    model.solve(alpha, shift, g)
}

fn pole_error(h: &BlochMatrix, margin: f64) -> LapError {
    LapError::PoleProximity {
        alpha: h.alpha.iter().map(|z| [z.re, z.im]).collect(),
        margin,
    }
}

pub(crate) fn solve_matrix(h: &BlochMatrix, shift: C64, g: &[C64]) -> Result<Vec<C64>> {
    let scale = h.norm().max(f64::MIN_POSITIVE);
    match &h.entries {
        Entries::Diagonal(d) => {
            let mut out = Vec::with_capacity(d.len());
            let mut min_piv = f64::INFINITY;
            for (dv, gv) in d.iter().zip(g) {
                let p = dv - shift;
                min_piv = min_piv.min(p.norm());
                out.push(gv / p);
            }
            if min_piv < SINGULAR_PIVOT * scale {
                return Err(pole_error(h, min_piv / scale));
            }
            Ok(out)
        }
        Entries::Dense(m) => {
            let n = m.nrows();
            let shifted = m - DMatrix::<C64>::identity(n, n) * shift;
            let lu = shifted.clone().lu();
            let min_piv = lu.u().diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
            if !(min_piv >= SINGULAR_PIVOT * scale) {
                return Err(pole_error(h, min_piv / scale));
            }
            let rhs = DVector::from_column_slice(g);
            let mut x = lu.solve(&rhs).ok_or_else(|| pole_error(h, 0.0))?;
            let gnorm = rhs.norm();
            for _ in 0..3 {
                let r = &rhs - &shifted * &x;
                if r.norm() <= 1e-10 * gnorm {
                    break;
                }
                if let Some(dx) = lu.solve(&r) {
                    x += dx;
                }
            }
            let r = &rhs - &shifted * &x;
            if r.norm() > 1e-10 * gnorm {
                return Err(pole_error(h, min_piv / scale));
            }
            Ok(x.as_slice().to_vec())
        }
    }
}

/// Eigen-expansion form of the damped cell solution at real `α`:
/// `Σ_m f̂_m / (μ_m - shift) c_m` over all bands.
pub fn solve_cell_eigen(model: &CellModel, alpha: &[f64], shift: C64, g: &[C64]) -> Result<Vec<C64>> {
    let a: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
    let h = model.assemble(&a);
    let bands = eigensolve(&h, h.len())?;
    let mut out = vec![ZERO; h.len()];
    for b in &bands {
        let coef = eigen_source_coeff(b, g) / (C64::new(b.mu, 0.0) - shift);
        for (o, c) in out.iter_mut().zip(&b.coeffs) {
            *o += coef * c;
        }
    }
    Ok(out)
}

/// Factors `H(α_c) - λ` and reports whether its smallest pivot, relative to
/// `‖H‖`, clears [`POLE_FREE_MARGIN`].
pub fn pole_free_check(model: &CellModel, alpha: &[C64], lambda: f64) -> PoleCheck {
    let h = model.assemble(alpha);
    let scale = h.norm().max(f64::MIN_POSITIVE);
    let min_piv = match &h.entries {
        Entries::Diagonal(d) => d.iter().map(|z| (z - lambda).norm()).fold(f64::INFINITY, f64::min),
        Entries::Dense(m) => {
            let n = m.nrows();
            let lu = (m - DMatrix::<C64>::identity(n, n) * C64::new(lambda, 0.0)).lu();
            lu.u().diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min)
        }
    };
    let margin = min_piv / scale;
    PoleCheck {
        pass: margin >= POLE_FREE_MARGIN,
        margin,
    }
}

/// Two-sided inverse iteration at complex `α` with a fixed shift, seeded from
/// nearby right/left eigenvectors. Returns the eigenvalue closest to the shift
/// along with its right and left eigenvectors.
pub fn continue_eigen(
    model: &CellModel,
    alpha: &[C64],
    shift: C64,
    seed_right: &[C64],
    seed_left: &[C64],
    iterations: usize,
) -> Result<ComplexEigen> {
    let h = model.assemble(alpha);
    let scale = h.norm().max(1.0);
    let stagnation = |what: &str| {
        LapError::BranchContinuation(format!(
            "inverse iteration {what} at alpha={:?}",
            alpha.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>()
        ))
    };
    let mut x = seed_right.to_vec();
    let mut y = seed_left.to_vec();
    match &h.entries {
        Entries::Diagonal(d) => {
            for _ in 0..iterations.max(1) {
                for (i, dv) in d.iter().enumerate() {
                    let p = dv - shift;
                    if p.norm() == 0.0 {
                        return Err(stagnation("hit an exact eigenvalue"));
                    }
                    x[i] /= p;
                    y[i] /= p.conj();
                }
                normalize(&mut x);
                normalize(&mut y);
            }
        }
        Entries::Dense(m) => {
            let n = m.nrows();
            let shifted = m - DMatrix::<C64>::identity(n, n) * shift;
            let lu = shifted.clone().lu();
            let lu_adj = shifted.adjoint().lu();
            for _ in 0..iterations.max(1) {
                let xs = lu
                    .solve(&DVector::from_column_slice(&x))
                    .ok_or_else(|| stagnation("met a singular shift"))?;
                let ys = lu_adj
                    .solve(&DVector::from_column_slice(&y))
                    .ok_or_else(|| stagnation("met a singular shift"))?;
                x = xs.as_slice().to_vec();
                y = ys.as_slice().to_vec();
                normalize(&mut x);
                normalize(&mut y);
            }
        }
    }
    let hx = h.matvec(&x);
    let yx = cdot(&y, &x);
    if yx.norm() < 1e-12 {
        return Err(stagnation("produced orthogonal left and right vectors"));
    }
    let mu = cdot(&y, &hx) / yx;
    let resid: f64 = hx
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - mu * b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    if !(resid <= 1e-8 * scale) {
        return Err(stagnation(&format!("stagnated (residual {resid:.3e})")));
    }
    // align the gauge of x with the seed so that consecutive samples vary smoothly
    let ph = cdot(&x, seed_right);
    if ph.norm() > 0.0 {
        let u = ph / ph.norm();
        x.iter_mut().for_each(|z| *z *= u);
    }
    let ph = cdot(&y, seed_left);
    if ph.norm() > 0.0 {
        let u = ph / ph.norm();
        y.iter_mut().for_each(|z| *z *= u);
    }
    Ok(ComplexEigen { mu, right: x, left: y })
}

fn normalize(v: &mut [C64]) {
    let n = vnorm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|z| *z /= n);
    }
}

/// Directional derivative `y†(dir·∇H)x / y†x` of a continued eigenvalue.
pub fn eigen_derivative(model: &CellModel, alpha: &[C64], dir: &[C64], e: &ComplexEigen) -> C64 {
    let gx = model.grad_apply(alpha, dir, &e.right);
    cdot(&e.left, &gx) / cdot(&e.left, &e.right)
}

/// Evaluates Bloch-type sums `e^{iα·x} Σ_j c_j e^{ij·x} / (2π)^{n/2}` at a
/// fixed set of points, with per-axis phase tables.
#[derive(Debug, Clone)]
pub struct FieldEvaluator {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    j_max: usize,
    tables: Vec<[Vec<C64>; 2]>,
    scale: f64,
}

impl FieldEvaluator {
    pub fn new(dim: usize, j_max: usize, points: &[Vec<f64>]) -> Self {
        let jm = j_max as i32;
        let tables = points
            .iter()
            .map(|x| {
                let t = |k: usize| -> Vec<C64> {
                    if k >= dim {
                        return vec![C64::new(1.0, 0.0); 2 * j_max + 1];
                    }
                    (-jm..=jm).map(|j| C64::from_polar(1.0, j as f64 * x[k])).collect()
                };
                [t(0), t(1)]
            })
            .collect();
        Self {
            dim,
            points: points.to_vec(),
            j_max,
            tables,
            scale: (2.0 * PI).powf(-(dim as f64) / 2.0),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Values at every point.
    pub fn eval(&self, alpha: &[C64], coeffs: &[C64]) -> Vec<C64> {
        (0..self.points.len()).map(|p| self.eval_at(p, alpha, coeffs)).collect()
    }

    pub fn eval_at(&self, p: usize, alpha: &[C64], coeffs: &[C64]) -> C64 {
        let x = &self.points[p];
        let [e1, e2] = &self.tables[p];
        let side = 2 * self.j_max + 1;
        let periodic: C64 = if self.dim == 1 {
            coeffs.iter().zip(e1).map(|(c, e)| c * e).sum()
        } else {
            let mut acc = ZERO;
            for (r, e1r) in e1.iter().enumerate() {
                let row: C64 = coeffs[r * side..(r + 1) * side]
                    .iter()
                    .zip(e2)
                    .map(|(c, e)| c * e)
                    .sum();
                acc += e1r * row;
            }
            acc
        };
        let phase: C64 = alpha.iter().zip(x).map(|(a, xv)| a * *xv).sum();
        (phase * C64::i()).exp() * periodic * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{source_fourier_vector, SourceSpec};

    fn r(v: &[f64]) -> Vec<C64> {
        v.iter().map(|x| C64::new(*x, 0.0)).collect()
    }

    #[test]
    fn free_space_is_diagonal() {
        let m = CellModel::new(&MediumSpec::free_space(2), 2).unwrap();
        let h = m.assemble(&r(&[0.2, 0.1]));
        let d = h.to_dense();
        for (p, j) in m.index.list.iter().enumerate() {
            let want = (0.2 + j[0] as f64).powi(2) + (0.1 + j[1] as f64).powi(2);
            assert!((d[(p, p)].re - want).abs() < 1e-14);
        }
        assert_eq!(d.iter().filter(|z| z.norm() > 0.0).count(), m.len());
    }

    #[test]
    fn cosine_potential_entries() {
        let m = CellModel::new(&MediumSpec::cosine_potential(1, 1.0), 4).unwrap();
        assert!(!m.is_diagonal());
        let h = m.assemble(&r(&[0.3])).to_dense();
        for p in 0..m.len() {
            for q in 0..m.len() {
                let jp = m.index.list[p][0] as f64;
                let want = if p == q {
                    (0.3 + jp).powi(2)
                } else if (p as i64 - q as i64).abs() == 1 {
                    1.0
                } else {
                    0.0
                };
                assert!((h[(p, q)].re - want).abs() < 1e-14 && h[(p, q)].im == 0.0);
            }
        }
    }

    #[test]
    fn truncation_warning_is_reported() {
        let mut med = MediumSpec::free_space(1);
        med.v_coeffs.insert(vec![3], C64::new(0.1, 0.0));
        med.v_coeffs.insert(vec![-3], C64::new(0.1, 0.0));
        let h = assemble(&med, &r(&[0.0]), 2).unwrap();
        assert_eq!(h.warnings.len(), 1);
        assert!(assemble(&med, &r(&[0.0]), 0).is_err());
    }

    #[test]
    fn free_space_bands() {
        let m = CellModel::new(&MediumSpec::free_space(2), 3).unwrap();
        let b = eigensolve(&m.assemble(&r(&[0.2, 0.1])), 4).unwrap();
        let mus: Vec<f64> = b.iter().map(|x| x.mu).collect();
        for (a, w) in mus.iter().zip([0.05, 0.65, 0.85, 1.25]) {
            assert!((a - w).abs() < 1e-14);
        }
        let b0 = eigensolve(&m.assemble(&r(&[0.0, 0.0])), 1).unwrap();
        assert_eq!(b0[0].mu, 0.0);
        assert_eq!(b0[0].coeffs[m.index.position([0, 0]).unwrap()], C64::new(1.0, 0.0));
        assert!(eigensolve(&m.assemble(&[C64::new(0.1, 0.1), C64::new(0.0, 0.0)]), 1).is_err());
    }

    #[test]
    fn degeneracy_flag() {
        let m = CellModel::new(&MediumSpec::free_space(1), 4).unwrap();
        let b = eigensolve(&m.assemble(&r(&[0.0])), 3).unwrap();
        assert_eq!(b[0].multiplicity, 1);
        assert_eq!(b[1].multiplicity, 2);
        assert!(matches!(
            hf_gradient(&m, &[0.0], &b[1]),
            Err(LapError::DegenerateBand { .. })
        ));
    }

    #[test]
    fn cosine_band_converged_in_truncation() {
        let med = MediumSpec::cosine_potential(1, 1.0);
        let coarse = eigensolve(&assemble(&med, &r(&[0.25]), 16).unwrap(), 1).unwrap();
        let fine = eigensolve(&assemble(&med, &r(&[0.25]), 32).unwrap(), 1).unwrap();
        assert!((coarse[0].mu - fine[0].mu).abs() < 1e-10);
        // residual of the eigenpair
        let h = assemble(&med, &r(&[0.25]), 16).unwrap();
        let hv = h.matvec(&coarse[0].coeffs);
        let res: f64 = hv
            .iter()
            .zip(&coarse[0].coeffs)
            .map(|(a, b)| (a - b * coarse[0].mu).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-9 * h.norm());
    }

    #[test]
    fn hf_gradient_examples() {
        let m = CellModel::new(&MediumSpec::free_space(2), 3).unwrap();
        let b = eigensolve(&m.assemble(&r(&[0.2, 0.1])), 1).unwrap();
        let g = hf_gradient(&m, &[0.2, 0.1], &b[0]).unwrap();
        assert!((g[0] - 0.4).abs() < 1e-14 && (g[1] - 0.2).abs() < 1e-14);

        let med = MediumSpec::cosine_potential(1, 1.0);
        let m = CellModel::new(&med, 16).unwrap();
        let mu = |a: f64| eigensolve(&m.assemble(&r(&[a])), 1).unwrap()[0].mu;
        let b = eigensolve(&m.assemble(&r(&[0.2])), 1).unwrap();
        let g = hf_gradient(&m, &[0.2], &b[0]).unwrap()[0];
        let h = 1e-4;
        let fd = (mu(0.2 + h) - mu(0.2 - h)) / (2.0 * h);
        assert!((g - fd).abs() <= 1e-6 * g.abs());
        let b0 = eigensolve(&m.assemble(&r(&[0.0])), 1).unwrap();
        assert!(hf_gradient(&m, &[0.0], &b0[0]).unwrap()[0].abs() < 1e-10);
    }

    #[test]
    fn source_coefficients() {
        let m = CellModel::new(&MediumSpec::free_space(2), 3).unwrap();
        let g = source_fourier_vector(&SourceSpec::delta(2), &r(&[0.2, 0.1]), 3);
        let b = eigensolve(&m.assemble(&r(&[0.2, 0.1])), 3).unwrap();
        for band in &b {
            assert!((eigen_source_coeff(band, &g) - C64::new(1.0 / (2.0 * PI), 0.0)).norm() < 1e-15);
            assert!((eigen_source_coeff(band, &band.coeffs) - 1.0).norm() < 1e-15);
        }
        let other = &b[1].coeffs;
        assert!(eigen_source_coeff(&b[0], other).norm() < 1e-15);
    }

    #[test]
    fn free_space_solve_is_diagonal_division() {
        let m = CellModel::new(&MediumSpec::free_space(1), 5).unwrap();
        let g = source_fourier_vector(&SourceSpec::delta(1), &r(&[0.1]), 5);
        let shift = C64::new(0.09, 0.01);
        let c = solve_cell(&m, &r(&[0.1]), shift, &g).unwrap();
        for (p, j) in m.index.list.iter().enumerate() {
            let want = g[p] / (C64::new((0.1 + j[0] as f64).powi(2), 0.0) - shift);
            assert!((c[p] - want).norm() < 1e-15);
        }
    }

    #[test]
    fn eigen_path_matches_direct_path() {
        let med = MediumSpec::cosine_potential(1, 1.0);
        let m = CellModel::new(&med, 12).unwrap();
        let g = source_fourier_vector(&SourceSpec::delta(1), &r(&[0.17]), 12);
        let shift = C64::new(0.4, 1e-2);
        let a = solve_cell(&m, &r(&[0.17]), shift, &g).unwrap();
        let b = solve_cell_eigen(&m, &[0.17], shift, &g).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn solve_on_the_level_set_is_singular() {
        let m = CellModel::new(&MediumSpec::free_space(1), 3).unwrap();
        let g = vec![C64::new(1.0, 0.0); m.len()];
        assert!(matches!(
            solve_cell(&m, &r(&[0.3]), C64::new(0.09, 0.0), &g),
            Err(LapError::PoleProximity { .. })
        ));
        let med = MediumSpec::cosine_potential(1, 1.0);
        let m = CellModel::new(&med, 8).unwrap();
        let mu = eigensolve(&m.assemble(&r(&[0.2])), 1).unwrap()[0].mu;
        let g = vec![C64::new(1.0, 0.0); m.len()];
        assert!(solve_cell(&m, &r(&[0.2]), C64::new(mu, 0.0), &g).is_err());
    }

    #[test]
    fn pole_free_examples() {
        let m = CellModel::new(&MediumSpec::free_space(1), 8).unwrap();
        assert!(pole_free_check(&m, &[C64::new(0.3, 0.05)], 0.09).pass);
        assert!(!pole_free_check(&m, &[C64::new(0.3, 0.0)], 0.09).pass);
        assert!(!pole_free_check(&m, &[C64::new(0.3, 1e-10)], 0.09).pass);
    }

    #[test]
    fn continuation_matches_exact_free_space_mode() {
        let m = CellModel::new(&MediumSpec::free_space(2), 3).unwrap();
        let a = [C64::new(0.0, 0.1), C64::new(0.35, 0.0)];
        let seed = eigensolve(&m.assemble(&r(&[0.0, 0.35])), 1).unwrap()[0].coeffs.clone();
        let e = continue_eigen(&m, &a, C64::new(0.09, 1e-7), &seed, &seed, 5).unwrap();
        let want = a[0] * a[0] + a[1] * a[1];
        assert!((e.mu - want).norm() < 1e-14);
        let d = eigen_derivative(&m, &a, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], &e);
        assert!((d - 2.0 * a[0]).norm() < 1e-14);
    }

    #[test]
    fn continuation_dense_matches_quadratic_eigenvalue() {
        let med = MediumSpec::cosine_potential(1, 0.3);
        let m = CellModel::new(&med, 10).unwrap();
        let a0 = 0.2;
        let b = eigensolve(&m.assemble(&r(&[a0])), 1).unwrap()[0].clone();
        let ac = [C64::new(a0, 0.02)];
        let e = continue_eigen(&m, &ac, C64::new(b.mu, 1e-3), &b.coeffs, &b.coeffs, 8).unwrap();
        // right and left residuals of the non-Hermitian matrix
        let h = m.assemble(&ac).to_dense();
        let x = DVector::from_column_slice(&e.right);
        let y = DVector::from_column_slice(&e.left);
        assert!((&h * &x - &x * e.mu).norm() < 1e-12);
        assert!((h.adjoint() * &y - &y * e.mu.conj()).norm() < 1e-12);
        assert!((e.mu - b.mu).norm() < 0.05);
        // derivative versus difference quotient
        let dir = [C64::new(1.0, 0.0)];
        let d = eigen_derivative(&m, &ac, &dir, &e);
        let hstep = 1e-5;
        let ep = continue_eigen(&m, &[ac[0] + hstep], e.mu, &e.right, &e.left, 6).unwrap();
        let em = continue_eigen(&m, &[ac[0] - hstep], e.mu, &e.right, &e.left, 6).unwrap();
        let fd = (ep.mu - em.mu) / (2.0 * hstep);
        assert!((d - fd).norm() < 1e-7);
    }

    #[test]
    fn evaluator_matches_direct_sum() {
        let pts = vec![vec![0.7, -2.1], vec![4.0, 1.0]];
        let ev = FieldEvaluator::new(2, 2, &pts);
        let idx = FourierIndex::new(2, 2);
        let coeffs: Vec<C64> = (0..idx.len()).map(|k| C64::new(k as f64 * 0.01, 0.5 - k as f64 * 0.02)).collect();
        let alpha = [C64::new(0.1, 0.05), C64::new(-0.2, 0.0)];
        for (p, x) in pts.iter().enumerate() {
            let mut want = ZERO;
            for (c, j) in coeffs.iter().zip(&idx.list) {
                let ph = (alpha[0] + j[0] as f64) * x[0] + (alpha[1] + j[1] as f64) * x[1];
                want += c * (ph * C64::i()).exp();
            }
            want /= 2.0 * PI;
            assert!((ev.eval_at(p, &alpha, &coeffs) - want).norm() < 1e-14);
        }
    }
}
