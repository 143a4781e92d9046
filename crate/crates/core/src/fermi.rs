//! The level set `F_λ = {α : μ_j(α) = λ}`: extraction from a band grid,
//! Newton refinement, classification by the sign of `∇μ·n`, surface
//! quadrature weights and the complex continuation of roots near points
//! where `∇μ·n` vanishes.

use std::collections::HashMap;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::bands::{band_at, BandGrid};
use crate::cell::{continue_eigen, eigen_derivative, hf_gradient, CellModel, ComplexEigen};
use crate::error::{LapError, Result};
use crate::lattice::{dot, norm, wrap_to_b, DirectionalFrame};
use crate::quadrature::gauss_legendre;

/// Residual `|μ - λ|` accepted for a refined level-set point.
pub const LEVEL_TOL: f64 = 1e-10;
/// Relative tolerance on `|∇μ·n| / ‖∇μ‖` for the degenerate tag.
pub const DEGENERATE_TOL: f64 = 1e-8;
/// Smallest admissible `‖∇μ‖` on the level set.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Newton iterations allowed in [`refine_point`].
pub const NEWTON_MAX: usize = 20;
/// Smallest admissible `|a0|` at a degenerate point.
pub const A0_MIN: f64 = 1e-6;

/// Direction class of a level-set point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Tag {
    Plus,
    Minus,
    Degenerate,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Plus => "plus",
            Tag::Minus => "minus",
            Tag::Degenerate => "degenerate",
        }
    }
}

/// A traced isocontour before refinement. Points are unwrapped, so a closed
/// polyline repeats its first point (up to a lattice vector) at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPolyline {
    pub band: usize,
    pub points: Vec<Vec<f64>>,
    pub closed: bool,
}

fn unwrap_near(p: &[f64], reference: &[f64]) -> Vec<f64> {
    p.iter().zip(reference).map(|(v, r)| v + (r - v).round()).collect()
}

/// Traces `μ_band = λ` on the grid: marching squares on the torus in two
/// dimensions, sign-change brackets in one. Polylines are oriented with `∇μ`
/// on their left.
pub fn extract_level_set(grid: &BandGrid, lambda: f64, band: usize) -> Vec<RawPolyline> {
    let n = grid.n;
    let h = 1.0 / n as f64;
    let val = |i: usize, j: usize| grid.mu(grid.flat(&[i, j]), band) - lambda;
    if grid.dim == 1 {
        let mut out = Vec::new();
        for k in 0..n {
            let (va, vb) = (val(k, 0), val(k + 1, 0));
            if (va > 0.0) != (vb > 0.0) {
                let t = va / (va - vb);
                let x = grid.coord(k) + t * h;
                out.push(RawPolyline {
                    band,
                    points: vec![vec![x]],
                    closed: false,
                });
            }
        }
        return out;
    }
    // edge keys: (axis, i, j) joins node (i,j) to (i,j)+e_axis
    type Key = (u8, usize, usize);
    let crossing = |key: Key| -> Option<Vec<f64>> {
        let (ax, i, j) = key;
        let (i2, j2) = if ax == 0 { (i + 1, j) } else { (i, j + 1) };
        let (va, vb) = (val(i, j), val(i2, j2));
        if (va > 0.0) == (vb > 0.0) {
            return None;
        }
        let t = va / (va - vb);
        let a = [grid.coord(i), grid.coord(j)];
        let b = [grid.coord(i2), grid.coord(j2)];
        Some(vec![a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
    };
    let mut segments: Vec<(Key, Key)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let ip = (i + 1) % n;
            let jp = (j + 1) % n;
            let bottom = (0u8, i, j);
            let right = (1u8, ip, j);
            let top = (0u8, i, jp);
            let left = (1u8, i, j);
            let edges = [bottom, right, top, left];
            let hits: Vec<Key> = edges.iter().copied().filter(|e| crossing(*e).is_some()).collect();
            match hits.len() {
                2 => segments.push((hits[0], hits[1])),
                4 => {
                    let center = 0.25 * (val(i, j) + val(i + 1, j) + val(i + 1, j + 1) + val(i, j + 1));
                    if (center > 0.0) == (val(i, j) > 0.0) {
                        segments.push((bottom, right));
                        segments.push((top, left));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                _ => {}
            }
        }
    }
    let mut incident: HashMap<Key, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        incident.entry(*a).or_default().push(k);
        incident.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let walk = |start_edge: Key, first_seg: usize, used: &mut Vec<bool>| -> (Vec<Key>, bool) {
        let mut keys = vec![start_edge];
        let mut seg = first_seg;
        let mut edge = start_edge;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == edge { b } else { a };
            if next == start_edge {
                return (keys, true);
            }
            keys.push(next);
            edge = next;
            match incident[&edge].iter().find(|s| !used[**s]) {
                Some(s) => seg = *s,
                None => return (keys, false),
            }
        }
    };
    for k in 0..segments.len() {
        if used[k] {
            continue;
        }
        let a = segments[k].0;
        let (mut keys, closed) = walk(a, k, &mut used);
        if !closed {
            // extend backwards from the first edge
            if let Some(s) = incident[&a].iter().find(|s| !used[**s]).copied() {
                let (mut back, _) = walk(a, s, &mut used);
                back.reverse();
                back.pop();
                back.extend(keys);
                keys = back;
            }
        }
        let mut pts: Vec<Vec<f64>> = Vec::with_capacity(keys.len() + 1);
        for key in &keys {
            let p = crossing(*key).expect("edge on the contour");
            let p = match pts.last() {
                Some(prev) => unwrap_near(&p, prev),
                None => p,
            };
            pts.push(p);
        }
        if closed {
            let first = unwrap_near(&pts[0], pts.last().expect("nonempty"));
            pts.push(first);
        }
        // orientation from the first edge: the positive node must lie on the left
        let (ax, i, j) = keys[0];
        let (i2, j2) = if ax == 0 { (i + 1, j) } else { (i, j + 1) };
        let pos = if val(i, j) > 0.0 {
            vec![grid.coord(i), grid.coord(j)]
        } else {
            vec![grid.coord(i2), grid.coord(j2)]
        };
        let pos = unwrap_near(&pos, &pts[0]);
        if pts.len() >= 2 {
            let d = [pts[1][0] - pts[0][0], pts[1][1] - pts[0][1]];
            let left = [-d[1], d[0]];
            if left[0] * (pos[0] - pts[0][0]) + left[1] * (pos[1] - pts[0][1]) < 0.0 {
                pts.reverse();
            }
        }
        out.push(RawPolyline { band, points: pts, closed });
    }
    out
}

/// Outcome of Newton refinement of one point.
#[derive(Debug, Clone)]
pub struct RefinedPoint {
    pub alpha: Vec<f64>,
    pub mu: f64,
    pub grad: Vec<f64>,
    /// Eigenvector at `α` reduced to `B`.
    pub coeffs: Vec<C64>,
    pub simple: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Newton iteration `α ← α - (μ-λ)∇μ/‖∇μ‖²` until `|μ-λ| ≤ 1e-10`.
pub fn refine_point(model: &CellModel, alpha0: &[f64], lambda: f64, band: usize) -> Result<RefinedPoint> {
    let mut alpha = alpha0.to_vec();
    let mut iterations = 0;
    let mut polish = false;
    let mut fallback: Option<(Vec<f64>, f64, Vec<f64>, Vec<C64>)> = None;
    loop {
        let e = band_at(model, &alpha, band)?;
        if polish && (e.mu - lambda).abs() > LEVEL_TOL {
            let (a, mu, grad, coeffs) = fallback.take().expect("polish follows a converged iterate");
            return Ok(RefinedPoint {
                alpha: a,
                mu,
                grad,
                coeffs,
                simple: true,
                converged: true,
                iterations,
            });
        }
        let r = e.mu - lambda;
        let grad = match hf_gradient(model, &wrap_to_b(&alpha), &e) {
            Ok(g) => g,
            Err(_) => {
                return Ok(RefinedPoint {
                    alpha,
                    mu: e.mu,
                    grad: vec![0.0; model.dim],
                    coeffs: e.coeffs,
                    simple: false,
                    converged: r.abs() <= LEVEL_TOL,
                    iterations,
                })
            }
        };
        let g2 = dot(&grad, &grad);
        let done = r.abs() <= LEVEL_TOL;
        // one extra step after reaching the tolerance, unless already exact
        let polished = done && (polish || r.abs() <= 1e-15 * (1.0 + lambda.abs()));
        if polished || iterations >= NEWTON_MAX || g2 == 0.0 {
            let drift = alpha.iter().zip(alpha0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            return Ok(RefinedPoint {
                alpha,
                mu: e.mu,
                grad,
                coeffs: e.coeffs,
                simple: true,
                converged: done && drift < 0.25,
                iterations,
            });
        }
        if done {
            polish = true;
            fallback = Some((alpha.clone(), e.mu, grad.clone(), e.coeffs.clone()));
        }
        for (a, g) in alpha.iter_mut().zip(&grad) {
            *a -= r * g / g2;
        }
        iterations += 1;
    }
}

/// Refines every point of a polyline.
pub fn refine_points(model: &CellModel, polyline: &RawPolyline, lambda: f64) -> Result<Vec<RefinedPoint>> {
    polyline
        .points
        .par_iter()
        .map(|p| refine_point(model, p, lambda, polyline.band))
        .collect()
}

/// A point of the refined, classified level set.
#[derive(Debug, Clone)]
pub struct LevelPoint {
    /// Unwrapped quasi-momentum (continuous along the polyline).
    pub alpha: Vec<f64>,
    pub mu: f64,
    pub grad: Vec<f64>,
    pub grad_dot_n: f64,
    pub tag: Tag,
    /// Trapezoid arclength weight on plus-tagged runs.
    pub weight: f64,
    /// Eigenvector at `α` reduced to `B`.
    pub coeffs: Vec<C64>,
}

/// Three consecutive polyline points `(p, m, q)` with quadratic arclength weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Panel {
    pub nodes: [usize; 3],
    pub weights: [f64; 3],
    /// Whether the panel belongs to `F⁺` (its middle point is plus-tagged).
    pub plus: bool,
}

/// One connected piece of the level set of one band.
#[derive(Debug, Clone)]
pub struct LevelSegment {
    pub band: usize,
    pub closed: bool,
    pub points: Vec<LevelPoint>,
    /// Present in two dimensions when the points alternate node/midpoint.
    pub panels: Vec<Panel>,
}

/// Refined level set for the bands in `J(λ)`.
#[derive(Debug, Clone)]
pub struct LevelSetData {
    pub dim: usize,
    pub lambda: f64,
    pub n_hat: Vec<f64>,
    pub segments: Vec<LevelSegment>,
    /// Diagnostics for points dropped during refinement.
    pub dropped: Vec<String>,
    /// Points that landed on a multiple eigenvalue.
    pub multiple_points: usize,
}

impl LevelSetData {
    /// Total arclength from the panel weights (2D).
    pub fn arclength(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.panels.iter())
            .map(|p| p.weights.iter().sum::<f64>())
            .sum()
    }

    /// All degenerate-tagged points (each closed-polyline point once).
    pub fn degenerate_points(&self) -> Vec<(usize, &LevelPoint)> {
        let mut out = Vec::new();
        for seg in &self.segments {
            let n = if seg.closed { seg.points.len() - 1 } else { seg.points.len() };
            for p in &seg.points[..n] {
                if p.tag == Tag::Degenerate {
                    out.push((seg.band, p));
                }
            }
        }
        out
    }

    /// Plus-tagged points in one dimension.
    pub fn plus_points(&self) -> Vec<(usize, &LevelPoint)> {
        self.segments
            .iter()
            .flat_map(|s| s.points.iter().map(move |p| (s.band, p)))
            .filter(|(_, p)| p.tag == Tag::Plus)
            .collect()
    }
}

fn tag_of(grad: &[f64], n_hat: &[f64]) -> (f64, Tag) {
    let gn = dot(grad, n_hat);
    let g = norm(grad);
    let tag = if gn.abs() <= DEGENERATE_TOL * g {
        Tag::Degenerate
    } else if gn > 0.0 {
        Tag::Plus
    } else {
        Tag::Minus
    };
    (gn, tag)
}

/// Quadratic-in-arclength weights for the parabola through `p`, `m`, `q`.
pub fn parabola_weights(p: &[f64], m: &[f64], q: &[f64]) -> [f64; 3] {
    let (xs, ws) = gauss_legendre(8);
    let d: Vec<f64> = (0..p.len()).map(|k| 0.5 * (q[k] - p[k])).collect();
    let c: Vec<f64> = (0..p.len()).map(|k| 0.5 * (p[k] + q[k]) - m[k]).collect();
    // P(u) = m + u d + u² c on u ∈ [-1, 1]
    let speed = |u: f64| -> f64 { (0..p.len()).map(|k| (d[k] + 2.0 * u * c[k]).powi(2)).sum::<f64>().sqrt() };
    let half = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ws)
            .map(|(x, w)| 0.5 * (b - a) * w * speed(0.5 * (b - a) * x + 0.5 * (a + b)))
            .sum()
    };
    let tm = half(-1.0, 0.0);
    let l = tm + half(0.0, 1.0);
    // ∫_0^L Lagrange basis on nodes {0, tm, L}
    let int = |a: f64, b: f64| l.powi(3) / 3.0 - (a + b) * l * l / 2.0 + a * b * l;
    [
        int(tm, l) / (tm * l),
        int(0.0, l) / (tm * (tm - l)),
        int(0.0, tm) / (l * (l - tm)),
    ]
}

/// Tags points, forms trapezoid weights on plus runs and, for segments whose
/// points alternate node/midpoint, the quadratic panels.
pub fn classify(segments: Vec<(usize, bool, Vec<RefinedPoint>)>, lambda: f64, frame: &DirectionalFrame, with_panels: bool) -> LevelSetData {
    let n_hat = &frame.n_hat;
    let mut out = Vec::new();
    for (band, closed, pts) in segments {
        let mut points: Vec<LevelPoint> = pts
            .into_iter()
            .map(|r| {
                let (gn, tag) = tag_of(&r.grad, n_hat);
                LevelPoint {
                    alpha: r.alpha,
                    mu: r.mu,
                    grad: r.grad,
                    grad_dot_n: gn,
                    tag,
                    weight: 0.0,
                    coeffs: r.coeffs,
                }
            })
            .collect();
        if frame.dim == 1 {
            for p in &mut points {
                p.weight = if p.tag == Tag::Plus { 1.0 } else { 0.0 };
            }
        } else {
            for k in 0..points.len().saturating_sub(1) {
                let (a, b) = (points[k].tag, points[k + 1].tag);
                let on = |t: Tag| t != Tag::Minus;
                if on(a) && on(b) && (a == Tag::Plus || b == Tag::Plus) {
                    let len = norm(&points[k + 1].alpha.iter().zip(&points[k].alpha).map(|(x, y)| x - y).collect::<Vec<_>>());
                    points[k].weight += 0.5 * len;
                    points[k + 1].weight += 0.5 * len;
                }
            }
        }
        let mut panels = Vec::new();
        if with_panels && points.len() >= 3 && points.len() % 2 == 1 {
            for k in (0..points.len() - 2).step_by(2) {
                let weights = parabola_weights(&points[k].alpha, &points[k + 1].alpha, &points[k + 2].alpha);
                panels.push(Panel {
                    nodes: [k, k + 1, k + 2],
                    weights,
                    plus: points[k + 1].tag == Tag::Plus,
                });
            }
        }
        out.push(LevelSegment {
            band,
            closed,
            points,
            panels,
        });
    }
    LevelSetData {
        dim: frame.dim,
        lambda,
        n_hat: n_hat.clone(),
        segments: out,
        dropped: Vec::new(),
        multiple_points: 0,
    }
}

fn grad_n(p: &RefinedPoint, n_hat: &[f64]) -> f64 {
    dot(&p.grad, n_hat)
}

/// Bisection along the chord between two refined points for the zero of `∇μ·n`.
fn insert_degenerate(
    model: &CellModel,
    a: &RefinedPoint,
    b: &RefinedPoint,
    lambda: f64,
    band: usize,
    n_hat: &[f64],
) -> Result<RefinedPoint> {
    let (mut lo, mut hi) = (0.0, 1.0);
    let fa = grad_n(a, n_hat);
    let mut best = a.clone();
    for _ in 0..60 {
        let t = 0.5 * (lo + hi);
        let chord: Vec<f64> = a.alpha.iter().zip(&b.alpha).map(|(x, y)| x + t * (y - x)).collect();
        let q = refine_point(model, &chord, lambda, band)?;
        let fq = grad_n(&q, n_hat);
        best = q;
        if fq.abs() <= 1e-13 * norm(&best.grad) || hi - lo < 1e-15 {
            break;
        }
        if (fq > 0.0) == (fa > 0.0) {
            lo = t;
        } else {
            hi = t;
        }
    }
    Ok(best)
}

/// Extraction, refinement, degenerate-point insertion, midpoint insertion and
/// classification for the listed bands.
pub fn build_level_set(
    model: &CellModel,
    grid: &BandGrid,
    lambda: f64,
    frame: &DirectionalFrame,
    bands: &[usize],
) -> Result<LevelSetData> {
    let mut dropped = Vec::new();
    let mut multiple = 0;
    let mut segs = Vec::new();
    let n_hat = frame.n_hat.clone();
    for &band in bands {
        for poly in extract_level_set(grid, lambda, band) {
            let refined = refine_points(model, &poly, lambda)?;
            let mut pts = Vec::with_capacity(refined.len());
            for r in refined {
                if !r.simple {
                    multiple += 1;
                }
                if r.converged && r.simple {
                    pts.push(r);
                } else {
                    dropped.push(format!(
                        "band {band} point {:?}: residual {:.3e} after {} iterations{}",
                        r.alpha,
                        r.mu - lambda,
                        r.iterations,
                        if r.simple { "" } else { " (multiple eigenvalue)" }
                    ));
                }
            }
            if pts.is_empty() {
                continue;
            }
            if grid.dim == 1 {
                segs.push((band, false, pts));
                continue;
            }
            if poly.closed && pts.len() < 3 {
                continue;
            }
            // keep the closing point consistent with the (refined) first point
            if poly.closed {
                let last = pts.len() - 1;
                let shift: Vec<f64> = pts[last].alpha.iter().zip(&pts[0].alpha).map(|(l, f)| (l - f).round()).collect();
                let mut first = pts[0].clone();
                first.alpha.iter_mut().zip(&shift).for_each(|(a, s)| *a += s);
                pts[last] = first;
            }
            let mut with_d = vec![pts[0].clone()];
            for k in 0..pts.len() - 1 {
                let (a, b) = (&pts[k], &pts[k + 1]);
                let (fa, fb) = (grad_n(a, &n_hat), grad_n(b, &n_hat));
                let (_, ta) = tag_of(&a.grad, &n_hat);
                let (_, tb) = tag_of(&b.grad, &n_hat);
                if ta != Tag::Degenerate && tb != Tag::Degenerate && (fa > 0.0) != (fb > 0.0) {
                    let mut d = insert_degenerate(model, a, b, lambda, band, &n_hat)?;
                    // force the degenerate tag: the bisection converged to the sign change
                    let t = frame_tangent(&n_hat);
                    let gt = dot(&d.grad, &t);
                    let gn = grad_n(&d, &n_hat);
                    if gn.abs() > DEGENERATE_TOL * norm(&d.grad) {
                        d.grad = t.iter().map(|v| v * gt).collect();
                    }
                    with_d.push(d);
                }
                with_d.push(b.clone());
            }
            let mut full = vec![with_d[0].clone()];
            for k in 0..with_d.len() - 1 {
                let (a, b) = (&with_d[k], &with_d[k + 1]);
                let mid: Vec<f64> = a.alpha.iter().zip(&b.alpha).map(|(x, y)| 0.5 * (x + y)).collect();
                let m = refine_point(model, &mid, lambda, band)?;
                if !(m.converged && m.simple) {
                    dropped.push(format!("band {band} midpoint {:?} did not converge", m.alpha));
                }
                full.push(m);
                full.push(b.clone());
            }
            segs.push((band, poly.closed, full));
        }
    }
    let mut data = classify(segs, lambda, frame, grid.dim == 2);
    data.dropped = dropped;
    data.multiple_points = multiple;
    Ok(data)
}

fn frame_tangent(n_hat: &[f64]) -> Vec<f64> {
    vec![-n_hat[1], n_hat[0]]
}

/// A continued root `s(γ)` of `μ(γ t + s n) = λ` with `Im s > 0`.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub tau: f64,
    pub gamma: f64,
    pub s: C64,
    pub alpha: Vec<C64>,
    pub eig: ComplexEigen,
    pub dsmu: C64,
    pub dgmu: C64,
    /// `|∂_s μ| sqrt(1 + |s'(γ)|²)`.
    pub g_s: f64,
}

/// Complex continuation of the level set from a degenerate point.
///
/// The branch is parametrized by `γ = γ₀ + side·τ²`, which makes the root
/// analytic in `τ` at the anchor.
#[derive(Debug, Clone)]
pub struct ComplexBranch {
    pub band: usize,
    /// Degenerate point reduced to `B`.
    pub anchor: Vec<f64>,
    pub anchor_gamma: f64,
    pub anchor_s: f64,
    /// `½ nᵀ D²μ n` at the anchor.
    pub a0: f64,
    /// `∂_γ ∂_s μ` at the anchor.
    pub b0: f64,
    /// `∂_γ μ` at the anchor.
    pub c1: f64,
    /// Direction of `γ` in which the real roots disappear.
    pub side: f64,
    /// Real-side sign convention for `sgn(∂_s μ)`.
    pub sign_s: f64,
    pub lambda: f64,
    anchor_coeffs: Vec<C64>,
    pub samples: Vec<BranchPoint>,
}

fn c64v(v: &[f64]) -> Vec<C64> {
    v.iter().map(|x| C64::new(*x, 0.0)).collect()
}

impl ComplexBranch {
    pub fn gamma_at(&self, tau: f64) -> f64 {
        self.anchor_gamma + self.side * tau * tau
    }

    fn alpha(&self, frame: &DirectionalFrame, gamma: f64, s: C64) -> Vec<C64> {
        let t = &frame.tangents[0];
        (0..2).map(|k| C64::new(gamma * t[k], 0.0) + s * frame.n_hat[k]).collect()
    }

    /// Initial guess from the local quadratic model.
    pub fn model_root(&self, tau: f64) -> C64 {
        let dg = self.side * tau * tau;
        let disc = self.b0 * self.b0 * dg * dg - 4.0 * self.a0 * self.c1 * dg;
        let re = -self.b0 * dg / (2.0 * self.a0);
        let im = (-disc).max(0.0).sqrt() / (2.0 * self.a0.abs());
        C64::new(self.anchor_s + re, im)
    }

    /// The root at parameter `τ`, by Newton in `s` seeded from `seed`
    /// (or the quadratic model and the anchor eigenvector).
    pub fn point_at(
        &self,
        model: &CellModel,
        frame: &DirectionalFrame,
        tau: f64,
        seed: Option<&BranchPoint>,
    ) -> Result<BranchPoint> {
        let gamma = self.gamma_at(tau);
        let lambda = self.lambda;
        let (mut s, mut right, mut left) = match seed {
            Some(p) => {
                // linear predictor in τ from the seed's slope
                let ds = p.dgmu / p.dsmu * (-2.0 * self.side * p.tau);
                (p.s + ds * (tau - p.tau), p.eig.right.clone(), p.eig.left.clone())
            }
            None => (self.model_root(tau), self.anchor_coeffs.clone(), self.anchor_coeffs.clone()),
        };
        if seed.is_some_and(|p| !(p.s.im > 0.0) || (s.im <= 0.0)) {
            s = C64::new(s.re, s.im.abs().max(1e-300));
        }
        let shift = C64::new(lambda, 1e-9 * (1.0 + lambda.abs()));
        let t = c64v(&frame.tangents[0]);
        let nv = c64v(&frame.n_hat);
        let mut last = None;
        for _ in 0..40 {
            let alpha = self.alpha(frame, gamma, s);
            let e = continue_eigen(model, &alpha, shift, &right, &left, 3)?;
            let dsmu = eigen_derivative(model, &alpha, &nv, &e);
            let r = e.mu - lambda;
            right = e.right.clone();
            left = e.left.clone();
            let step = if dsmu.norm() > 0.0 { r / dsmu } else { C64::new(0.0, 0.0) };
            let done = r.norm() <= 1e-14 * (1.0 + lambda.abs()) || step.norm() <= 1e-15 * (1.0 + s.norm());
            last = Some((alpha, e, dsmu));
            if done {
                break;
            }
            s -= step;
        }
        let (alpha, e, dsmu) = last.expect("at least one iteration");
        if (e.mu - lambda).norm() > 1e-8 * (1.0 + lambda.abs()) {
            return Err(LapError::BranchContinuation(format!(
                "root did not converge at gamma={gamma} (residual {:.3e})",
                (e.mu - lambda).norm()
            )));
        }
        let dgmu = eigen_derivative(model, &alpha, &t, &e);
        let sp = -dgmu / dsmu;
        let g_s = dsmu.norm() * (1.0 + sp.norm_sqr()).sqrt();
        Ok(BranchPoint {
            tau,
            gamma,
            s,
            alpha,
            eig: e,
            dsmu,
            dgmu,
            g_s,
        })
    }

    /// Follows the branch from the anchor to `τ`, in `steps` geometric steps.
    pub fn track_to(
        &self,
        model: &CellModel,
        frame: &DirectionalFrame,
        tau: f64,
        steps: usize,
    ) -> Result<BranchPoint> {
        let t0 = tau * 1e-3;
        let mut p = self.point_at(model, frame, t0, None)?;
        let ratio = (tau / t0).powf(1.0 / steps.max(1) as f64);
        let mut t = t0;
        for _ in 0..steps.max(1) {
            t = (t * ratio).min(tau);
            p = self.point_at(model, frame, t, Some(&p))?;
        }
        Ok(p)
    }
}

/// Builds the complex branch anchored at a degenerate point and samples it on
/// `samples` values of `τ` up to `sqrt(gamma_window)`.
pub fn complex_extension(
    model: &CellModel,
    anchor: &[f64],
    frame: &DirectionalFrame,
    band: usize,
    lambda: f64,
    gamma_window: f64,
    samples: usize,
) -> Result<ComplexBranch> {
    if frame.dim != 2 {
        return Err(LapError::IrregularLambda(
            "a point with mu' = 0 on the level set in one dimension".into(),
        ));
    }
    let anchor = wrap_to_b(anchor);
    let e = band_at(model, &anchor, band)?;
    let n_hat = &frame.n_hat;
    let t = &frame.tangents[0];
    let grad_at = |p: &[f64]| -> Result<Vec<f64>> {
        let e = band_at(model, p, band)?;
        hf_gradient(model, &wrap_to_b(p), &e)
    };
    let g0 = grad_at(&anchor)?;
    let shifted = |dir: &[f64], h: f64| -> Vec<f64> { anchor.iter().zip(dir).map(|(a, d)| a + h * d).collect() };
    let central = |dir: &[f64], h: f64| -> Result<f64> {
        let gp = grad_at(&shifted(dir, h))?;
        let gm = grad_at(&shifted(dir, -h))?;
        Ok((dot(&gp, n_hat) - dot(&gm, n_hat)) / (2.0 * h))
    };
    let h = 1e-3;
    let rich = |dir: &[f64]| -> Result<f64> { Ok((4.0 * central(dir, h / 2.0)? - central(dir, h)?) / 3.0) };
    let a0 = 0.5 * rich(n_hat)?;
    if a0.abs() < A0_MIN {
        return Err(LapError::HigherOrderDegeneracy { anchor: anchor.clone(), a0 });
    }
    let b0 = rich(t)?;
    let c1 = dot(&g0, t);
    let side = if c1 * a0 > 0.0 { 1.0 } else { -1.0 };
    let (gamma0, s0) = frame.decompose(&anchor);
    let mut branch = ComplexBranch {
        band,
        anchor: anchor.clone(),
        anchor_gamma: gamma0[0],
        anchor_s: s0,
        a0,
        b0,
        c1,
        side,
        sign_s: 1.0,
        lambda,
        anchor_coeffs: e.coeffs,
        samples: Vec::new(),
    };
    let tau_max = gamma_window.max(0.0).sqrt();
    let mut prev: Option<BranchPoint> = None;
    let mut pts = Vec::with_capacity(samples);
    for k in 1..=samples {
        let tau = tau_max * k as f64 / samples as f64;
        let p = match &prev {
            Some(p) => branch.point_at(model, frame, tau, Some(p))?,
            None => branch.track_to(model, frame, tau, 8)?,
        };
        prev = Some(p.clone());
        pts.push(p);
    }
    branch.samples = pts;
    Ok(branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::sample_grid;
    use crate::lattice::build_frame;
    use crate::medium::MediumSpec;

    fn free2(j: usize) -> CellModel {
        CellModel::new(&MediumSpec::free_space(2), j).unwrap()
    }

    #[test]
    fn circle_polyline() {
        let model = free2(3);
        let grid = sample_grid(&model, 32, 1, false).unwrap();
        let polys = extract_level_set(&grid, 0.09, 1);
        assert_eq!(polys.len(), 1);
        let p = &polys[0];
        assert!(p.closed);
        let diag = 2f64.sqrt() / 32.0;
        for q in &p.points {
            assert!((norm(q) - 0.3).abs() <= diag);
        }
        // ∇μ = 2α points outward, so keeping it on the left means clockwise travel
        let area: f64 = p.points.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum();
        assert!(area < 0.0);
    }

    #[test]
    fn wrapping_level_set() {
        let model = free2(3);
        let grid = sample_grid(&model, 48, 1, false).unwrap();
        let lambda = 0.2;
        let polys = extract_level_set(&grid, lambda, 1);
        assert!(!polys.is_empty());
        // every point is near some circle |α + j|² = λ
        for p in &polys {
            for q in &p.points {
                let best = (-1..=1)
                    .flat_map(|a| (-1..=1).map(move |b| (a, b)))
                    .map(|(a, b)| ((q[0] + a as f64).powi(2) + (q[1] + b as f64).powi(2)).sqrt())
                    .map(|r| (r - lambda.sqrt()).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 2f64.sqrt() / 48.0);
            }
        }
        let outside = extract_level_set(&grid, 5.0, 1);
        assert!(outside.is_empty());
    }

    #[test]
    fn refine_circle_point_one_step() {
        let model = free2(3);
        let r = refine_point(&model, &[0.25, 0.1], 0.09, 1).unwrap();
        assert!(r.converged);
        assert!((norm(&r.alpha) - 0.3).abs() < 1e-12);
        let start = [0.3 * 0.6, 0.3 * 0.8];
        let r = refine_point(&model, &start, 0.09, 1).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.alpha, start.to_vec());
    }

    #[test]
    fn refine_cosine_root_matches_bisection() {
        let model = CellModel::new(&MediumSpec::cosine_potential(1, 1.0), 16).unwrap();
        let lo = band_at(&model, &[0.0], 1).unwrap().mu;
        let hi = band_at(&model, &[0.5], 1).unwrap().mu;
        let lambda = 0.5 * (lo + hi);
        let r = refine_point(&model, &[0.2], lambda, 1).unwrap();
        let (mut a, mut b) = (0.0, 0.5);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if band_at(&model, &[m], 1).unwrap().mu < lambda {
                a = m;
            } else {
                b = m;
            }
        }
        assert!((r.alpha[0] - 0.5 * (a + b)).abs() < 1e-10);
    }

    #[test]
    fn circle_classification() {
        let model = free2(3);
        let grid = sample_grid(&model, 32, 1, false).unwrap();
        for (n, axis) in [([1.0, 0.0], 0), ([0.0, 1.0], 1)] {
            let frame = build_frame(&n).unwrap();
            let data = build_level_set(&model, &grid, 0.09, &frame, &[1]).unwrap();
            assert!(data.dropped.is_empty());
            for seg in &data.segments {
                for p in &seg.points {
                    assert!((p.mu - 0.09).abs() <= LEVEL_TOL);
                    let expect = if p.alpha[axis].abs() < 1e-9 {
                        Tag::Degenerate
                    } else if p.alpha[axis] > 0.0 {
                        Tag::Plus
                    } else {
                        Tag::Minus
                    };
                    assert_eq!(p.tag, expect, "{:?}", p.alpha);
                }
            }
            let d = data.degenerate_points();
            assert_eq!(d.len(), 2);
            for (_, p) in d {
                assert!(p.alpha[axis].abs() < 1e-9);
                assert!((p.alpha[1 - axis].abs() - 0.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_dimensional_plus_roots() {
        let model = CellModel::new(&MediumSpec::free_space(1), 4).unwrap();
        let grid = sample_grid(&model, 32, 1, false).unwrap();
        let frame = build_frame(&[1.0]).unwrap();
        let data = build_level_set(&model, &grid, 0.09, &frame, &[1]).unwrap();
        let plus = data.plus_points();
        assert_eq!(plus.len(), 1);
        assert!((plus[0].1.alpha[0] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn arclength_converges() {
        let model = free2(3);
        let frame = build_frame(&[1.0, 0.0]).unwrap();
        let exact = 2.0 * std::f64::consts::PI * 0.3;
        let mut errs = Vec::new();
        for n in [16, 32] {
            let grid = sample_grid(&model, n, 1, false).unwrap();
            let data = build_level_set(&model, &grid, 0.09, &frame, &[1]).unwrap();
            errs.push((data.arclength() - exact).abs());
        }
        assert!(errs[1] < 1e-5, "{errs:?}");
        assert!(errs[0] / errs[1] > 4.0, "{errs:?}");
    }

    #[test]
    fn parabola_weights_on_a_line() {
        let w = parabola_weights(&[0.0, 0.0], &[0.5, 0.0], &[1.0, 0.0]);
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-14);
        assert!((w[1] - 4.0 / 6.0).abs() < 1e-14);
        assert!((w[2] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn circle_complex_root() {
        let model = free2(3);
        let frame = build_frame(&[1.0, 0.0]).unwrap();
        // frame tangent is (0, 1), so γ is α₂
        let br = complex_extension(&model, &[0.0, 0.3], &frame, 1, 0.09, 0.05, 5).unwrap();
        assert!((br.a0 - 1.0).abs() < 1e-8);
        assert_eq!(br.side, 1.0);
        let p = br.samples.last().unwrap();
        assert!((p.gamma - 0.35).abs() < 1e-14);
        assert!((p.s - C64::new(0.0, (0.35f64.powi(2) - 0.09).sqrt())).norm() < 1e-10);
        assert!((p.s.im - 0.180278).abs() < 1e-6);
        for q in &br.samples {
            assert!(q.s.im > 0.0);
            assert!((q.eig.mu - 0.09).norm() <= 1e-6 * 1.09);
        }
        // continuity at the anchor
        let near = br.point_at(&model, &frame, 1e-4, None).unwrap();
        assert!(near.s.norm() < 1e-3);
    }

    #[test]
    fn complex_branch_on_negative_side() {
        let model = free2(3);
        let frame = build_frame(&[1.0, 0.0]).unwrap();
        let br = complex_extension(&model, &[0.0, -0.3], &frame, 1, 0.09, 0.01, 3).unwrap();
        assert_eq!(br.side, -1.0);
        let p = br.samples.last().unwrap();
        assert!((p.s.im - (p.gamma * p.gamma - 0.09).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn real_plus_point_gs_equals_gradient_norm() {
        // on the real level set, |∂_s μ| sqrt(1+s'²) = ‖∇μ‖
        let model = free2(3);
        let frame = build_frame(&[0.6, 0.8]).unwrap();
        let alpha = [0.3 * 0.8, 0.3 * 0.6];
        let e = band_at(&model, &alpha, 1).unwrap();
        let g = hf_gradient(&model, &alpha, &e).unwrap();
        let ds = dot(&g, &frame.n_hat);
        let dg = dot(&g, &frame.tangents[0]);
        let gs = ds.abs() * (1.0 + (dg / ds).powi(2)).sqrt();
        assert!((gs - norm(&g)).abs() < 1e-8);
    }

    #[test]
    fn dim_one_degenerate_is_irregular() {
        let model = CellModel::new(&MediumSpec::free_space(1), 3).unwrap();
        let frame = build_frame(&[1.0]).unwrap();
        assert!(matches!(
            complex_extension(&model, &[0.0], &frame, 1, 0.0, 0.01, 2),
            Err(LapError::IrregularLambda(_))
        ));
    }
}
