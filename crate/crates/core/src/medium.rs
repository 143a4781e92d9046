//! Periodic coefficients `A`, `V` and the source `f`, given by Fourier tables
//! on the cell `Ω = (-π, π]^n`, together with the discrete Floquet–Bloch
//! transform and its inverse.
//!
//! Conventions: `A(x) = Σ_j Â(j) e^{ij·x}`, `V(x) = Σ_j V̂(j) e^{ij·x}`, and a
//! source table holds the coefficients of `f` in the orthonormal basis
//! `e^{ij·x} / (2π)^{n/2}` of `L²(Ω)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Tolerance for the reality and symmetry checks on coefficient tables.
pub const TABLE_TOL: f64 = 1e-12;

/// Truncated set of Fourier indices `|j|_∞ ≤ j_max`, ordered row-major
/// (first component slowest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FourierIndex {
    pub dim: usize,
    pub j_max: usize,
    pub side: usize,
    pub list: Vec<[i32; 2]>,
}

impl FourierIndex {
    pub fn new(dim: usize, j_max: usize) -> Self {
        let side = 2 * j_max + 1;
        let jm = j_max as i32;
        let list = if dim == 1 {
            (-jm..=jm).map(|j| [j, 0]).collect()
        } else {
            let mut l = Vec::with_capacity(side * side);
            for a in -jm..=jm {
                for b in -jm..=jm {
                    l.push([a, b]);
                }
            }
            l
        };
        Self {
            dim,
            j_max,
            side,
            list,
        }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    /// Row of a multi-index, if it lies inside the truncation.
    pub fn position(&self, j: [i32; 2]) -> Option<usize> {
        let jm = self.j_max as i32;
        if j[0].abs() > jm || (self.dim == 2 && j[1].abs() > jm) || (self.dim == 1 && j[1] != 0) {
            return None;
        }
        let a = (j[0] + jm) as usize;
        Some(if self.dim == 1 {
            a
        } else {
            a * self.side + (j[1] + jm) as usize
        })
    }
}

pub(crate) fn key2(j: &[i32]) -> [i32; 2] {
    [j[0], if j.len() > 1 { j[1] } else { 0 }]
}

/// Fourier description of the periodic medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    pub dim: usize,
    /// Row-major `dim × dim` complex matrices `Â(j)`.
    pub a_coeffs: BTreeMap<Vec<i32>, Vec<C64>>,
    pub v_coeffs: BTreeMap<Vec<i32>, C64>,
    pub c0: f64,
}

/// Outcome of the sampled admissibility checks on a medium.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumReport {
    pub min_eig_a: f64,
    pub max_reality_defect: f64,
    pub max_symmetry_defect: f64,
    pub support_radius: usize,
}

impl MediumSpec {
    /// Builds and validates a medium.
    pub fn new(
        dim: usize,
        a_coeffs: BTreeMap<Vec<i32>, Vec<C64>>,
        v_coeffs: BTreeMap<Vec<i32>, C64>,
        c0: f64,
    ) -> Result<Self> {
        let m = Self {
            dim,
            a_coeffs,
            v_coeffs,
            c0,
        };
        m.validate()?;
        Ok(m)
    }

    /// `A = I`, `V = 0`.
    pub fn free_space(dim: usize) -> Self {
        Self::constant(dim, &identity(dim), 0.0)
    }

    /// Constant real symmetric `A` (row-major) and constant `V`.
    pub fn constant(dim: usize, a: &[f64], v: f64) -> Self {
        let mut a_coeffs = BTreeMap::new();
        a_coeffs.insert(vec![0; dim], a.iter().map(|x| C64::new(*x, 0.0)).collect());
        let mut v_coeffs = BTreeMap::new();
        if v != 0.0 {
            v_coeffs.insert(vec![0; dim], C64::new(v, 0.0));
        }
        let c0 = min_sym_eig(dim, a);
        Self {
            dim,
            a_coeffs,
            v_coeffs,
            c0,
        }
    }

    /// `A = I` with the potential `V(x) = Σ_k amp·2cos(x_k)`, i.e. `V̂(±e_k) = amp`.
    pub fn cosine_potential(dim: usize, amp: f64) -> Self {
        let mut m = Self::free_space(dim);
        for k in 0..dim {
            for s in [-1, 1] {
                let mut j = vec![0; dim];
                j[k] = s;
                m.v_coeffs.insert(j, C64::new(amp, 0.0));
            }
        }
        m
    }

    /// Largest `|j|_∞` among nonzero table entries.
    pub fn support_radius(&self) -> usize {
        let a = self
            .a_coeffs
            .iter()
            .filter(|(_, m)| m.iter().any(|z| z.norm() > 0.0))
            .map(|(j, _)| inf_norm(j));
        let v = self
            .v_coeffs
            .iter()
            .filter(|(_, z)| z.norm() > 0.0)
            .map(|(j, _)| inf_norm(j));
        a.chain(v).max().unwrap_or(0)
    }

    /// True when only the zero-frequency coefficients are present.
    pub fn is_constant(&self) -> bool {
        self.support_radius() == 0
    }

    /// `A(x)` as a real row-major matrix.
    pub fn a_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        for (j, m) in &self.a_coeffs {
            let ph = C64::from_polar(1.0, dot_i(j, x));
            for (o, c) in out.iter_mut().zip(m) {
                *o += (c * ph).re;
            }
        }
        out
    }

    /// `V(x)`.
    pub fn v_at(&self, x: &[f64]) -> f64 {
        self.v_coeffs
            .iter()
            .map(|(j, c)| (c * C64::from_polar(1.0, dot_i(j, x))).re)
            .sum()
    }

    /// Reality, symmetry and sampled ellipticity on a `32^dim` grid.
    pub fn validate(&self) -> Result<MediumReport> {
        if !(1..=2).contains(&self.dim) {
            return Err(LapError::InvalidMedium(format!(
                "dimension {} is not supported",
                self.dim
            )));
        }
        if !(self.c0 > 0.0) {
            return Err(LapError::InvalidMedium(format!(
                "ellipticity constant must be positive, got {}",
                self.c0
            )));
        }
        let d2 = self.dim * self.dim;
        for (j, m) in &self.a_coeffs {
            if j.len() != self.dim || m.len() != d2 {
                return Err(LapError::InvalidMedium(format!(
                    "A coefficient at {j:?} has the wrong shape"
                )));
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(LapError::InvalidMedium(format!("non-finite A coefficient at {j:?}")));
            }
        }
        for (j, v) in &self.v_coeffs {
            if j.len() != self.dim {
                return Err(LapError::InvalidMedium(format!(
                    "V coefficient at {j:?} has the wrong shape"
                )));
            }
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(LapError::InvalidMedium(format!("non-finite V coefficient at {j:?}")));
            }
        }
        let mut reality: f64 = 0.0;
        let mut symmetry: f64 = 0.0;
        for (j, m) in &self.a_coeffs {
            let neg: Vec<i32> = j.iter().map(|v| -v).collect();
            let zero = vec![ZERO; d2];
            let mn = self.a_coeffs.get(&neg).unwrap_or(&zero);
            for (a, b) in m.iter().zip(mn) {
                reality = reality.max((a - b.conj()).norm());
            }
            if self.dim == 2 {
                symmetry = symmetry.max((m[1] - m[2]).norm());
            }
        }
        for (j, v) in &self.v_coeffs {
            let neg: Vec<i32> = j.iter().map(|v| -v).collect();
            let vn = self.v_coeffs.get(&neg).copied().unwrap_or(ZERO);
            reality = reality.max((v - vn.conj()).norm());
        }
        if reality > TABLE_TOL {
            return Err(LapError::InvalidMedium(format!(
                "coefficients are not conjugate-symmetric (defect {reality:.3e}); A and V must be real"
            )));
        }
        if symmetry > TABLE_TOL {
            return Err(LapError::InvalidMedium(format!(
                "A coefficients are not symmetric (defect {symmetry:.3e})"
            )));
        }
        let n: usize = 32;
        let mut min_eig = f64::INFINITY;
        let mut x = vec![0.0; self.dim];
        let total = n.pow(self.dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            for xk in x.iter_mut() {
                *xk = -PI + 2.0 * PI * (rem % n) as f64 / n as f64;
                rem /= n;
            }
            min_eig = min_eig.min(min_sym_eig(self.dim, &self.a_at(&x)));
        }
        if min_eig < self.c0 * (1.0 - 1e-12) {
            return Err(LapError::InvalidMedium(format!(
                "sampled minimum eigenvalue of A is {min_eig:.6e}, below c0 = {:.6e}",
                self.c0
            )));
        }
        Ok(MediumReport {
            min_eig_a: min_eig,
            max_reality_defect: reality,
            max_symmetry_defect: symmetry,
            support_radius: self.support_radius(),
        })
    }

    /// Parses the JSON medium format and validates the result.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MediumJson = serde_json::from_str(text)
            .map_err(|e| LapError::InvalidInput(format!("medium file: {e}")))?;
        let dim = raw.dimension;
        let mut a_coeffs = BTreeMap::new();
        for entry in raw.a {
            if entry.matrix.len() != dim || entry.matrix.iter().any(|r| r.len() != dim) {
                return Err(LapError::InvalidInput(format!(
                    "medium file: A matrix at {:?} must be {dim}x{dim}",
                    entry.j
                )));
            }
            let flat: Vec<C64> = entry.matrix.iter().flatten().map(|v| v.to_complex()).collect();
            accumulate(&mut a_coeffs, entry.j, flat, dim)?;
        }
        let mut v_coeffs = BTreeMap::new();
        for entry in raw.v {
            let z = C64::new(entry.re, entry.im);
            check_index(&entry.j, dim)?;
            *v_coeffs.entry(entry.j).or_insert(ZERO) += z;
        }
        Self::new(dim, a_coeffs, v_coeffs, raw.c0)
    }

    pub fn to_json(&self) -> String {
        let a = self
            .a_coeffs
            .iter()
            .map(|(j, m)| AEntry {
                j: j.clone(),
                matrix: m
                    .chunks(self.dim)
                    .map(|row| row.iter().map(|z| JsonNumber::from_complex(*z)).collect())
                    .collect(),
            })
            .collect();
        let v = self
            .v_coeffs
            .iter()
            .map(|(j, z)| CoeffEntry {
                j: j.clone(),
                re: z.re,
                im: z.im,
            })
            .collect();
        serde_json::to_string_pretty(&MediumJson {
            dimension: self.dim,
            a,
            v,
            c0: self.c0,
        })
        .expect("medium serialization cannot fail")
    }
}

fn accumulate(
    map: &mut BTreeMap<Vec<i32>, Vec<C64>>,
    j: Vec<i32>,
    m: Vec<C64>,
    dim: usize,
) -> Result<()> {
    check_index(&j, dim)?;
    let slot = map.entry(j).or_insert_with(|| vec![ZERO; dim * dim]);
    for (s, v) in slot.iter_mut().zip(m) {
        *s += v;
    }
    Ok(())
}

fn check_index(j: &[i32], dim: usize) -> Result<()> {
    if j.len() != dim {
        return Err(LapError::InvalidInput(format!(
            "multi-index {j:?} does not have {dim} components"
        )));
    }
    Ok(())
}

fn identity(dim: usize) -> Vec<f64> {
    if dim == 1 {
        vec![1.0]
    } else {
        vec![1.0, 0.0, 0.0, 1.0]
    }
}

fn min_sym_eig(dim: usize, a: &[f64]) -> f64 {
    if dim == 1 {
        a[0]
    } else {
        let m = Matrix2::new(a[0], 0.5 * (a[1] + a[2]), 0.5 * (a[1] + a[2]), a[3]);
        m.symmetric_eigenvalues().min()
    }
}

fn inf_norm(j: &[i32]) -> usize {
    j.iter().map(|v| v.unsigned_abs() as usize).max().unwrap_or(0)
}

fn dot_i(j: &[i32], x: &[f64]) -> f64 {
    j.iter().zip(x).map(|(a, b)| *a as f64 * b).sum()
}

#[derive(Serialize, Deserialize)]
struct MediumJson {
    dimension: usize,
    #[serde(rename = "A", default)]
    a: Vec<AEntry>,
    #[serde(rename = "V", default)]
    v: Vec<CoeffEntry>,
    c0: f64,
}

#[derive(Serialize, Deserialize)]
struct AEntry {
    j: Vec<i32>,
    matrix: Vec<Vec<JsonNumber>>,
}

#[derive(Serialize, Deserialize)]
struct CoeffEntry {
    j: Vec<i32>,
    re: f64,
    #[serde(default)]
    im: f64,
}

/// A matrix entry: plain real number, `[re, im]`, or `{"re":..,"im":..}`.
#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(untagged)]
enum JsonNumber {
    Real(f64),
    Pair([f64; 2]),
    Object {
        re: f64,
        #[serde(default)]
        im: f64,
    },
}

impl JsonNumber {
    fn to_complex(self) -> C64 {
        match self {
            JsonNumber::Real(r) => C64::new(r, 0.0),
            JsonNumber::Pair([r, i]) => C64::new(r, i),
            JsonNumber::Object { re, im } => C64::new(re, im),
        }
    }

    fn from_complex(z: C64) -> Self {
        if z.im == 0.0 {
            JsonNumber::Real(z.re)
        } else {
            JsonNumber::Object { re: z.re, im: z.im }
        }
    }
}

/// Compactly supported source `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceKind {
    /// Point source at the origin; every coefficient equals `(2π)^{-n/2}`.
    DeltaAtOrigin,
    /// Coefficients of `f` on `Ω`; `f` vanishes outside `Ω`.
    FourierTable(BTreeMap<Vec<i32>, C64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub dim: usize,
    pub kind: SourceKind,
}

impl SourceSpec {
    pub fn delta(dim: usize) -> Self {
        Self {
            dim,
            kind: SourceKind::DeltaAtOrigin,
        }
    }

    pub fn table(dim: usize, coeffs: BTreeMap<Vec<i32>, C64>) -> Result<Self> {
        for j in coeffs.keys() {
            check_index(j, dim)?;
        }
        Ok(Self {
            dim,
            kind: SourceKind::FourierTable(coeffs),
        })
    }

    /// Normalized Gaussian bump `exp(-|y|²/(2w²)) / (2πw²)^{n/2}` centred at the
    /// origin, tabulated up to `|j|_∞ ≤ m_max`. Coefficients are the whole-space
    /// transform, which matches the cell integral when `w ≪ π`.
    pub fn gaussian(dim: usize, width: f64, m_max: usize) -> Self {
        let mut coeffs = BTreeMap::new();
        let idx = FourierIndex::new(dim, m_max);
        let scale = (2.0 * PI).powf(-(dim as f64) / 2.0);
        for j in &idx.list {
            let r2 = (j[0] * j[0] + j[1] * j[1]) as f64;
            let v = scale * (-0.5 * r2 * width * width).exp();
            coeffs.insert(j[..dim].to_vec(), C64::new(v, 0.0));
        }
        Self {
            dim,
            kind: SourceKind::FourierTable(coeffs),
        }
    }

    /// Largest `|j|_∞` in the table (0 for the point source).
    pub fn support_radius(&self) -> usize {
        match &self.kind {
            SourceKind::DeltaAtOrigin => 0,
            SourceKind::FourierTable(t) => t.keys().map(|j| inf_norm(j)).max().unwrap_or(0),
        }
    }

    /// Largest coefficient modulus on the outermost shell relative to the
    /// largest coefficient overall. Small values indicate adequate truncation.
    pub fn decay_diagnostic(&self) -> f64 {
        match &self.kind {
            SourceKind::DeltaAtOrigin => 1.0,
            SourceKind::FourierTable(t) => {
                let r = self.support_radius();
                let peak = t.values().map(|z| z.norm()).fold(0.0, f64::max);
                if peak == 0.0 {
                    return 0.0;
                }
                let shell = t
                    .iter()
                    .filter(|(j, _)| inf_norm(j) == r)
                    .map(|(_, z)| z.norm())
                    .fold(0.0, f64::max);
                shell / peak
            }
        }
    }

    /// Value of the tabulated source at `y` (zero outside `Ω`).
    pub fn eval(&self, y: &[f64]) -> Result<C64> {
        match &self.kind {
            SourceKind::DeltaAtOrigin => Err(LapError::Unsupported(
                "point source has no pointwise values".into(),
            )),
            SourceKind::FourierTable(t) => {
                if y.iter().any(|v| v.abs() > PI) {
                    return Ok(ZERO);
                }
                let scale = (2.0 * PI).powf(-(self.dim as f64) / 2.0);
                Ok(t.iter()
                    .map(|(j, c)| c * C64::from_polar(scale, dot_i(j, y)))
                    .sum())
            }
        }
    }

    /// Parses `{"type":"delta"}` or `{"type":"fourier","coeffs":[...]}`.
    pub fn from_json(text: &str, dim: usize) -> Result<Self> {
        let raw: SourceJson = serde_json::from_str(text)
            .map_err(|e| LapError::InvalidInput(format!("source file: {e}")))?;
        match raw {
            SourceJson::Delta => Ok(Self::delta(dim)),
            SourceJson::Fourier { coeffs } => {
                let mut t = BTreeMap::new();
                for c in coeffs {
                    check_index(&c.j, dim)?;
                    *t.entry(c.j).or_insert(ZERO) += C64::new(c.re, c.im);
                }
                Self::table(dim, t)
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum SourceJson {
    Delta,
    Fourier { coeffs: Vec<CoeffEntry> },
}

/// `sin(πt)/(πt)` for complex `t`.
pub fn sinc(t: C64) -> C64 {
    let z = t * PI;
    if z.norm() < 1e-4 {
        let z2 = z * z;
        C64::new(1.0, 0.0) - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

/// Representation `g` of `e^{-iα·x} f` in the orthonormal Fourier basis of `Ω`,
/// `g_j = (2π)^{-n/2} ∫_Ω f(x) e^{-i(α+j)·x} dx`.
///
/// For a table source this is `Σ_m f_m Π_k sinc(m_k - j_k - α_k)`, an entire
/// function of `α` that reduces to the table itself at `α = 0`.
pub fn source_fourier_vector(source: &SourceSpec, alpha: &[C64], j_max: usize) -> Vec<C64> {
    PreparedSource::new(source, j_max).vector(alpha)
}

/// Source data pre-factored for repeated evaluation of
/// [`source_fourier_vector`] at many `α`.
#[derive(Debug, Clone)]
pub struct PreparedSource {
    dim: usize,
    index: FourierIndex,
    kind: Prepared,
}

#[derive(Debug, Clone)]
enum Prepared {
    Constant(C64),
    /// Rank-one terms `σ_r u_r(m1) v_r(m2)` of the coefficient table.
    Factored {
        m_max: i32,
        terms: Vec<(Vec<C64>, Vec<C64>)>,
    },
    Zero,
}

impl PreparedSource {
    pub fn new(source: &SourceSpec, j_max: usize) -> Self {
        let dim = source.dim;
        let index = FourierIndex::new(dim, j_max);
        let kind = match &source.kind {
            SourceKind::DeltaAtOrigin => {
                Prepared::Constant(C64::new((2.0 * PI).powf(-(dim as f64) / 2.0), 0.0))
            }
            SourceKind::FourierTable(t) if t.values().all(|z| z.norm() == 0.0) => Prepared::Zero,
            SourceKind::FourierTable(t) => {
                let m_max = source.support_radius() as i32;
                let side = (2 * m_max + 1) as usize;
                if dim == 1 {
                    let mut u = vec![ZERO; side];
                    for (j, c) in t {
                        u[(j[0] + m_max) as usize] += c;
                    }
                    Prepared::Factored {
                        m_max,
                        terms: vec![(u, vec![C64::new(1.0, 0.0)])],
                    }
                } else {
                    let mut f = DMatrix::<C64>::zeros(side, side);
                    for (j, c) in t {
                        f[((j[0] + m_max) as usize, (j[1] + m_max) as usize)] += c;
                    }
                    let svd = f.svd(true, true);
                    let u = svd.u.expect("requested U");
                    let vt = svd.v_t.expect("requested V^H");
                    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
                    let mut terms = Vec::new();
                    for (r, s) in svd.singular_values.iter().enumerate() {
                        if *s <= 1e-15 * smax {
                            continue;
                        }
                        let col: Vec<C64> = (0..side).map(|i| u[(i, r)] * *s).collect();
                        let row: Vec<C64> = (0..side).map(|i| vt[(r, i)]).collect();
                        terms.push((col, row));
                    }
                    Prepared::Factored { m_max, terms }
                }
            }
        };
        Self { dim, index, kind }
    }

    pub fn index(&self) -> &FourierIndex {
        &self.index
    }

    /// True for the point source, whose vector does not depend on `α`.
    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Prepared::Constant(_) | Prepared::Zero)
    }

    pub fn vector(&self, alpha: &[C64]) -> Vec<C64> {
        let n = self.index.len();
        match &self.kind {
            Prepared::Constant(c) => vec![*c; n],
            Prepared::Zero => vec![ZERO; n],
            Prepared::Factored { m_max, terms } => {
                let jm = self.index.j_max as i32;
                let side = self.index.side;
                // K_k[j][m] = sinc(m - j - α_k); sin(π(n - a)) = (-1)^(n+1) sin(πa)
                let kernel = |a: C64| -> Vec<C64> {
                    let w = (2 * m_max + 1) as usize;
                    let span = jm + *m_max;
                    let sin_pa = (a * PI).sin();
                    let diag: Vec<C64> = (-span..=span)
                        .map(|n| {
                            let t = C64::new(n as f64, 0.0) - a;
                            if t.norm() < 0.1 {
                                sinc(t)
                            } else {
                                let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
                                sin_pa * sign / (t * PI)
                            }
                        })
                        .collect();
                    let mut k = vec![ZERO; side * w];
                    for (jj, j) in (-jm..=jm).enumerate() {
                        for (mm, m) in (-m_max..=*m_max).enumerate() {
                            k[jj * w + mm] = diag[(m - j + span) as usize];
                        }
                    }
                    k
                };
                let w = (2 * m_max + 1) as usize;
                let contract = |k: &[C64], v: &[C64]| -> Vec<C64> {
                    (0..side)
                        .map(|jj| k[jj * w..(jj + 1) * w].iter().zip(v).map(|(a, b)| a * b).sum())
                        .collect()
                };
                let k1 = kernel(alpha[0]);
                if self.dim == 1 {
                    return contract(&k1, &terms[0].0);
                }
                let k2 = kernel(alpha[1]);
                let mut out = vec![ZERO; n];
                for (u, v) in terms {
                    let a = contract(&k1, u);
                    let b = contract(&k2, v);
                    for (i, ai) in a.iter().enumerate() {
                        let row = &mut out[i * side..(i + 1) * side];
                        for (o, bj) in row.iter_mut().zip(&b) {
                            *o += ai * bj;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Values of `φ` on a midpoint grid of `points_per_axis^n` nodes in each
/// translated cell `Ω + 2πm`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    pub dim: usize,
    pub points_per_axis: usize,
    pub cells: BTreeMap<Vec<i32>, Vec<C64>>,
}

impl CellSamples {
    pub fn new(dim: usize, points_per_axis: usize) -> Self {
        Self {
            dim,
            points_per_axis,
            cells: BTreeMap::new(),
        }
    }

    pub fn nodes_per_cell(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    /// Midpoint-rule weight of a node.
    pub fn node_weight(&self) -> f64 {
        (2.0 * PI / self.points_per_axis as f64).powi(self.dim as i32)
    }

    /// Coordinates of node `flat` in the reference cell.
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let p = self.points_per_axis;
        let mut rem = flat;
        let mut x = vec![0.0; self.dim];
        for k in (0..self.dim).rev() {
            x[k] = -PI + 2.0 * PI * ((rem % p) as f64 + 0.5) / p as f64;
            rem /= p;
        }
        x
    }

    pub fn insert(&mut self, cell: Vec<i32>, values: Vec<C64>) -> Result<()> {
        if cell.len() != self.dim || values.len() != self.nodes_per_cell() {
            return Err(LapError::InvalidInput("cell sample shape mismatch".into()));
        }
        self.cells.insert(cell, values);
        Ok(())
    }

    /// `Σ_cells Σ_nodes |φ|² · weight`.
    pub fn norm_sq(&self) -> f64 {
        let w = self.node_weight();
        self.cells
            .values()
            .flat_map(|v| v.iter())
            .map(|z| z.norm_sqr() * w)
            .sum()
    }
}

/// Uniform tensor grid of quasi-momenta covering `B` once.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrid {
    pub dim: usize,
    pub n: usize,
    pub nodes: Vec<Vec<f64>>,
}

impl AlphaGrid {
    /// Nodes `-1/2 + (k+1)/n`, so the right face `+1/2` is included.
    pub fn uniform(dim: usize, n: usize) -> Self {
        let axis: Vec<f64> = (0..n).map(|k| -0.5 + (k + 1) as f64 / n as f64).collect();
        let nodes = if dim == 1 {
            axis.iter().map(|a| vec![*a]).collect()
        } else {
            let mut v = Vec::with_capacity(n * n);
            for a in &axis {
                for b in &axis {
                    v.push(vec![*a, *b]);
                }
            }
            v
        };
        Self { dim, n, nodes }
    }

    /// Accepts an explicit node list if it is a uniform tensor grid with
    /// spacing `1/n` in every axis.
    pub fn from_nodes(dim: usize, nodes: Vec<Vec<f64>>) -> Result<Self> {
        let count = nodes.len();
        let n = if dim == 1 {
            count
        } else {
            (count as f64).sqrt().round() as usize
        };
        if n == 0 || n.pow(dim as u32) != count || nodes.iter().any(|a| a.len() != dim) {
            return Err(LapError::InvalidInput("alpha grid is not a full tensor grid".into()));
        }
        for k in 0..dim {
            let mut axis: Vec<f64> = nodes.iter().map(|a| a[k]).collect();
            axis.sort_by(f64::total_cmp);
            axis.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            if axis.len() != n {
                return Err(LapError::InvalidInput("alpha grid is not a tensor grid".into()));
            }
            let h = 1.0 / n as f64;
            if axis.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-12) {
                return Err(LapError::InvalidInput(format!(
                    "alpha grid is not uniform with spacing 1/{n} along axis {k}"
                )));
            }
        }
        Ok(Self { dim, n, nodes })
    }
}

/// Values of `(Jφ)(α, x)` at the nodes of an [`AlphaGrid`], each a vector over
/// the reference-cell sample nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlochField {
    pub dim: usize,
    pub points_per_axis: usize,
    pub grid: AlphaGrid,
    pub values: Vec<Vec<C64>>,
}

/// `(Jφ)(α, x + 2π·shift) = Σ_m φ(x + 2π(m + shift)) e^{-i2πα·m}` on the sample nodes.
pub fn bloch_value(samples: &CellSamples, alpha: &[f64], shift: &[i32]) -> Vec<C64> {
    let mut out = vec![ZERO; samples.nodes_per_cell()];
    for (cell, vals) in &samples.cells {
        // cell = m + shift
        let phase: f64 = cell
            .iter()
            .zip(shift)
            .zip(alpha)
            .map(|((c, s), a)| (c - s) as f64 * a)
            .sum();
        let e = C64::from_polar(1.0, -2.0 * PI * phase);
        for (o, v) in out.iter_mut().zip(vals) {
            *o += v * e;
        }
    }
    out
}

/// Discrete Floquet–Bloch transform of cell samples onto a uniform `α` grid.
pub fn floquet_transform(samples: &CellSamples, grid: &AlphaGrid) -> Result<BlochField> {
    let checked = AlphaGrid::from_nodes(grid.dim, grid.nodes.clone())?;
    if checked.dim != samples.dim {
        return Err(LapError::InvalidInput("alpha grid and samples differ in dimension".into()));
    }
    let zero_shift = vec![0; samples.dim];
    let values = grid
        .nodes
        .iter()
        .map(|a| bloch_value(samples, a, &zero_shift))
        .collect();
    Ok(BlochField {
        dim: samples.dim,
        points_per_axis: samples.points_per_axis,
        grid: checked,
        values,
    })
}

/// Trapezoid approximation of `∫_B ψ(α, x) e^{i2πα·m} dα` on the reference nodes.
pub fn inverse_floquet(field: &BlochField, m: &[i32]) -> Vec<C64> {
    let count = field.values.len() as f64;
    let len = field.values.first().map_or(0, |v| v.len());
    let mut out = vec![ZERO; len];
    for (a, vals) in field.grid.nodes.iter().zip(&field.values) {
        let phase: f64 = a.iter().zip(m).map(|(x, j)| x * *j as f64).sum();
        let e = C64::from_polar(1.0 / count, 2.0 * PI * phase);
        for (o, v) in out.iter_mut().zip(vals) {
            *o += v * e;
        }
    }
    out
}

impl BlochField {
    /// `α`-average of the squared cell norm.
    pub fn mean_norm_sq(&self) -> f64 {
        let w = (2.0 * PI / self.points_per_axis as f64).powi(self.dim as i32);
        let total: f64 = self
            .values
            .iter()
            .flat_map(|v| v.iter())
            .map(|z| z.norm_sqr() * w)
            .sum();
        total / self.values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn index_positions_roundtrip() {
        for dim in [1, 2] {
            let idx = FourierIndex::new(dim, 3);
            for (p, j) in idx.list.iter().enumerate() {
                assert_eq!(idx.position(*j), Some(p));
            }
            assert_eq!(idx.position([4, 0]), None);
        }
    }

    #[test]
    fn medium_json_roundtrip_and_validation() {
        let text = r#"{"dimension":2,"A":[{"j":[0,0],"matrix":[[1,0],[0,1]]}],
            "V":[{"j":[1,0],"re":0.25,"im":0.0},{"j":[-1,0],"re":0.25,"im":0.0}],"c0":1.0}"#;
        let m = MediumSpec::from_json(text).unwrap();
        assert_eq!(m.support_radius(), 1);
        assert!((m.v_at(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let back = MediumSpec::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn medium_rejects_non_real_and_non_elliptic() {
        let text = r#"{"dimension":1,"A":[{"j":[0],"matrix":[[1]]}],
            "V":[{"j":[1],"re":0.25,"im":0.0}],"c0":1.0}"#;
        assert!(matches!(MediumSpec::from_json(text), Err(LapError::InvalidMedium(_))));
        let text = r#"{"dimension":1,"A":[{"j":[0],"matrix":[[1]]},{"j":[1],"matrix":[[0.6]]},
            {"j":[-1],"matrix":[[0.6]]}],"c0":0.5}"#;
        assert!(matches!(MediumSpec::from_json(text), Err(LapError::InvalidMedium(_))));
        let text = r#"{"dimension":2,"A":[{"j":[0,0],"matrix":[[1,0.2],[0,1]]}],"c0":0.5}"#;
        assert!(matches!(MediumSpec::from_json(text), Err(LapError::InvalidMedium(_))));
        assert!(MediumSpec::from_json("{not json").is_err());
    }

    #[test]
    fn complex_entry_forms_parse() {
        let text = r#"{"dimension":1,"A":[{"j":[0],"matrix":[[2]]},
            {"j":[1],"matrix":[[{"re":0.1,"im":0.2}]]},{"j":[-1],"matrix":[[[0.1,-0.2]]]}],"c0":1.0}"#;
        let m = MediumSpec::from_json(text).unwrap();
        assert_eq!(m.a_coeffs[&vec![1]][0], c(0.1, 0.2));
    }

    #[test]
    fn ellipticity_sampled() {
        let r = MediumSpec::constant(2, &[1.0, 0.0, 0.0, 2.0], 0.0).validate().unwrap();
        assert!((r.min_eig_a - 1.0).abs() < 1e-14);
    }

    #[test]
    fn delta_vector_is_constant() {
        let s = SourceSpec::delta(2);
        let g = source_fourier_vector(&s, &[c(0.3, 0.1), c(-0.2, 0.0)], 3);
        assert_eq!(g.len(), 49);
        assert!(g.iter().all(|z| (z - c(1.0 / (2.0 * PI), 0.0)).norm() < 1e-16));
        let g1 = source_fourier_vector(&SourceSpec::delta(1), &[c(0.1, 0.0)], 2);
        assert!(g1.iter().all(|z| (z.re - (2.0 * PI).powf(-0.5)).abs() < 1e-16));
    }

    #[test]
    fn table_vector_at_zero_alpha_is_table() {
        let mut t = BTreeMap::new();
        t.insert(vec![0, 0], c(1.0, 0.0));
        t.insert(vec![1, -1], c(0.5, 0.25));
        let s = SourceSpec::table(2, t).unwrap();
        let g = source_fourier_vector(&s, &[c(0.0, 0.0), c(0.0, 0.0)], 3);
        let idx = FourierIndex::new(2, 3);
        for (p, j) in idx.list.iter().enumerate() {
            let want = match j {
                [0, 0] => c(1.0, 0.0),
                [1, -1] => c(0.5, 0.25),
                _ => c(0.0, 0.0),
            };
            assert!((g[p] - want).norm() < 1e-14, "{j:?}");
        }
    }

    #[test]
    fn table_vector_matches_direct_integral() {
        // g_j(α) = (2π)^{-1/2} ∫_Ω f(x) e^{-i(α+j)x} dx, by quadrature
        let mut t = BTreeMap::new();
        t.insert(vec![0], c(0.7, 0.0));
        t.insert(vec![2], c(0.1, -0.3));
        t.insert(vec![-1], c(-0.2, 0.05));
        let s = SourceSpec::table(1, t).unwrap();
        let alpha = c(0.31, 0.07);
        let g = source_fourier_vector(&s, &[alpha], 4);
        let (xs, ws) = crate::quadrature::gauss_legendre_on(80, -PI, PI);
        for (p, j) in FourierIndex::new(1, 4).list.iter().enumerate() {
            let mut acc = c(0.0, 0.0);
            for (x, w) in xs.iter().zip(&ws) {
                let f = s.eval(&[*x]).unwrap();
                acc += f * (-(alpha + j[0] as f64) * C64::i() * *x).exp() * *w;
            }
            acc /= (2.0 * PI).sqrt();
            assert!((acc - g[p]).norm() < 1e-13, "j={j:?}");
        }
    }

    #[test]
    fn factored_source_matches_unfactored_sum() {
        let s = SourceSpec::gaussian(2, 0.5, 5);
        let mut t2 = match &s.kind {
            SourceKind::FourierTable(t) => t.clone(),
            _ => unreachable!(),
        };
        t2.insert(vec![2, -3], c(0.01, 0.02));
        let s2 = SourceSpec::table(2, t2.clone()).unwrap();
        let alpha = [c(0.2, 0.1), c(-0.35, 0.0)];
        let g = source_fourier_vector(&s2, &alpha, 6);
        let idx = FourierIndex::new(2, 6);
        for (p, j) in idx.list.iter().enumerate().step_by(7) {
            let want: C64 = t2
                .iter()
                .map(|(m, f)| {
                    f * sinc(C64::new((m[0] - j[0]) as f64, 0.0) - alpha[0])
                        * sinc(C64::new((m[1] - j[1]) as f64, 0.0) - alpha[1])
                })
                .sum();
            assert!((g[p] - want).norm() < 1e-14);
        }
    }

    #[test]
    fn gaussian_table_matches_pointwise_gaussian() {
        let w = 0.3;
        let s = SourceSpec::gaussian(2, w, 24);
        for y in [[0.0, 0.0], [0.2, -0.1], [0.5, 0.4]] {
            let exact = (-(y[0] * y[0] + y[1] * y[1]) / (2.0 * w * w)).exp() / (2.0 * PI * w * w);
            assert!((s.eval(&y).unwrap().re - exact).abs() < 1e-9 * exact.max(1.0));
        }
        assert!(s.decay_diagnostic() < 1e-10);
    }

    fn two_cell_example() -> (CellSamples, Vec<C64>) {
        let mut s = CellSamples::new(1, 8);
        let vals: Vec<C64> = (0..8).map(|i| c(i as f64 * 0.1, 1.0 - i as f64 * 0.05)).collect();
        s.insert(vec![0], vals.clone()).unwrap();
        s.insert(vec![1], vals.clone()).unwrap();
        (s, vals)
    }

    #[test]
    fn floquet_examples() {
        let (s, vals) = two_cell_example();
        let grid = AlphaGrid::uniform(1, 8);
        let f = floquet_transform(&s, &grid).unwrap();
        for (a, v) in grid.nodes.iter().zip(&f.values) {
            let factor = c(1.0, 0.0) + C64::from_polar(1.0, -2.0 * PI * a[0]);
            for (x, y) in v.iter().zip(&vals) {
                assert!((x - y * factor).norm() < 1e-14);
            }
        }
        for m in [0, 1] {
            let back = inverse_floquet(&f, &[m]);
            assert!(back.iter().zip(&vals).all(|(a, b)| (a - b).norm() < 1e-12));
        }
        let none = inverse_floquet(&f, &[3]);
        assert!(none.iter().all(|z| z.norm() < 1e-12));

        let mut single = CellSamples::new(1, 4);
        single.insert(vec![0], vec![c(1.0, 2.0); 4]).unwrap();
        let f = floquet_transform(&single, &grid).unwrap();
        assert!(f.values.iter().all(|v| v == &f.values[0]));

        let zero = CellSamples::new(1, 4);
        let f = floquet_transform(&zero, &grid).unwrap();
        assert!(f.values.iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn non_uniform_grid_is_rejected() {
        let (s, _) = two_cell_example();
        let grid = AlphaGrid {
            dim: 1,
            n: 4,
            nodes: vec![vec![-0.3], vec![0.0], vec![0.25], vec![0.5]],
        };
        assert!(floquet_transform(&s, &grid).is_err());
    }

    #[test]
    fn quasi_periodicity_in_x() {
        let (s, _) = two_cell_example();
        for a in [0.1, -0.37, 0.5] {
            let base = bloch_value(&s, &[a], &[0]);
            for j in [-2, 1, 3] {
                let shifted = bloch_value(&s, &[a], &[j]);
                let ph = C64::from_polar(1.0, 2.0 * PI * a * j as f64);
                assert!(shifted.iter().zip(&base).all(|(x, y)| (x - y * ph).norm() < 1e-12));
            }
        }
    }

    #[test]
    fn alpha_periodicity() {
        let (s, _) = two_cell_example();
        let a = bloch_value(&s, &[0.5], &[0]);
        let b = bloch_value(&s, &[-0.5], &[0]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).norm() < 1e-14));
    }
}
