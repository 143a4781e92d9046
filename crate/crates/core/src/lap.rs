//! Limiting-absorption solutions written as a contour integral over a
//! deformed Brillouin zone `B_σ`, a surface integral over `F⁺` and a sum over
//! complex roots crossing the contour near points where `∇μ·n = 0`.
//!
//! Along every slice `{γ t + s n}` the real-line integral of `w` equals the
//! integral over `s ↦ s + iσ(γ, s)` plus `2πi` times the residues of the poles
//! lying between the two paths. Real poles on `F⁺` give the propagating term;
//! complex poles on the continued branches give the third term.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{check_regularity, sample_grid, RegularityReport};
use crate::cell::{cdot, eigensolve, pole_free_check, CellModel, FieldEvaluator, SINGULAR_PIVOT};
use crate::error::{LapError, Result};
use crate::fermi::{complex_extension, BranchPoint, ComplexBranch, LevelSetData, Tag};
use crate::lattice::{clip_line, dot, periodic_delta, wrap_scalar, wrap_to_b, DirectionalFrame};
use crate::medium::{AlphaGrid, MediumSpec, PreparedSource, SourceSpec};
use crate::quadrature::{integrate_adaptive, AdaptiveOptions};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const TWO_PI_I: C64 = C64 { re: 0.0, im: 2.0 * PI };
/// Retries of [`build_contour`], each halving `sigma2`.
pub const CONTOUR_RETRIES: usize = 6;
/// Largest trapezoid grid accepted by [`damped_solve`].
pub const MAX_DAMPED_NODES: usize = 1 << 28;

/// Numerical parameters of [`lap_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LapConfig {
    pub j_max: usize,
    /// Band-grid nodes per axis.
    pub grid_n: usize,
    /// Bands to sample; 0 picks enough to cover `λ`.
    pub num_bands: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub halo: f64,
    /// Initial outer nodes (2D) and pole-check slices.
    pub slices: usize,
    /// Initial nodes per slice and pole-check nodes per slice.
    pub nodes_per_slice: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_evals: usize,
    pub inner_max_evals: usize,
    /// Surface points closer than this to `D` are left out of the propagating term.
    pub exclude_radius: f64,
    /// Skip the pole-free scan of the contour (the solves still reject poles).
    pub skip_pole_check: bool,
}

impl Default for LapConfig {
    fn default() -> Self {
        Self {
            j_max: 16,
            grid_n: 32,
            num_bands: 0,
            sigma1: 0.25,
            sigma2: 0.05,
            halo: 0.1,
            slices: 64,
            nodes_per_slice: 256,
            abs_tol: 1e-9,
            rel_tol: 1e-8,
            max_evals: 4_000_000,
            inner_max_evals: 60_000,
            exclude_radius: 0.0,
            skip_pole_check: false,
        }
    }
}

impl LapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LapError::InvalidInput(m.to_string()));
        if self.j_max == 0 {
            return bad("j_max must be at least 1");
        }
        if self.grid_n < 8 {
            return bad("grid_n must be at least 8");
        }
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0 && self.halo > 0.0) {
            return bad("sigma1, sigma2 and halo must be positive");
        }
        if self.slices == 0 || self.nodes_per_slice == 0 {
            return bad("slices and nodes_per_slice must be positive");
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.exclude_radius >= 0.0) {
            return bad("exclude_radius must be nonnegative");
        }
        Ok(())
    }
}

/// Contour height `σ(α)`: `sigma2` within `halo` of the anchor set, `sigma1`
/// beyond `2·halo`, raised-cosine blend between. Distances are periodic.
#[derive(Debug, Clone)]
pub struct SigmaProfile {
    pub dim: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub halo: f64,
    segments: Vec<[[f64; 2]; 2]>,
}

impl SigmaProfile {
    pub fn constant(dim: usize, sigma: f64) -> Self {
        Self {
            dim,
            sigma1: sigma,
            sigma2: sigma,
            halo: 1.0,
            segments: Vec::new(),
        }
    }

    /// `segments` are pieces of `F⁺ ∪ Re F_c⁺` (degenerate segments are points).
    pub fn new(dim: usize, sigma1: f64, sigma2: f64, halo: f64, segments: Vec<[[f64; 2]; 2]>) -> Self {
        Self {
            dim,
            sigma1,
            sigma2,
            halo,
            segments,
        }
    }

    pub fn segments(&self) -> &[[[f64; 2]; 2]] {
        &self.segments
    }

    /// Periodic distance to the anchor set and its gradient.
    pub fn distance(&self, alpha: &[f64]) -> (f64, [f64; 2]) {
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        let q = [alpha[0], if self.dim > 1 { alpha[1] } else { 0.0 }];
        for [a, b] in &self.segments {
            let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
            let qq = [m[0] + wrap_scalar(q[0] - m[0]), m[1] + wrap_scalar(q[1] - m[1])];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let l2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if l2 > 0.0 {
                (((qq[0] - a[0]) * ab[0] + (qq[1] - a[1]) * ab[1]) / l2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = [qq[0] - p[0], qq[1] - p[1]];
            let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if dist < best.0 {
                let g = if dist > 0.0 { [d[0] / dist, d[1] / dist] } else { [0.0, 0.0] };
                best = (dist, g);
            }
        }
        best
    }

    /// `σ(α)` and `∇σ(α)`.
    pub fn eval(&self, alpha: &[f64]) -> (f64, [f64; 2]) {
        if self.segments.is_empty() || self.sigma1 == self.sigma2 {
            let s = if self.segments.is_empty() { self.sigma1 } else { self.sigma2 };
            return (s, [0.0, 0.0]);
        }
        let (d, g) = self.distance(alpha);
        let h = self.halo;
        if d <= h {
            return (self.sigma2, [0.0, 0.0]);
        }
        if d >= 2.0 * h {
            return (self.sigma1, [0.0, 0.0]);
        }
        let u = (d - h) / h;
        let chi = 0.5 * (1.0 + (PI * u).cos());
        let dchi = -0.5 * PI * (PI * u).sin() / h;
        let ds = self.sigma2 - self.sigma1;
        (self.sigma1 + ds * chi, [ds * dchi * g[0], ds * dchi * g[1]])
    }
}

/// Parameters of [`build_contour`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub halo: f64,
    pub slices: usize,
    pub nodes_per_slice: usize,
    pub check_poles: bool,
}

/// Pole-free scan of the contour nodes.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MarginReport {
    pub nodes_checked: usize,
    pub min_margin: f64,
    pub worst_alpha: Vec<[f64; 2]>,
    /// Nodes within the halo whose margin is below the pole-free threshold
    /// but above the solver's singularity threshold. Such nodes sit next to
    /// poles that are accounted for by residues.
    pub near_pole_nodes: usize,
}

/// The `τ`-intervals of a branch whose roots lie between the real zone and the contour.
#[derive(Debug, Clone, Serialize)]
pub struct BranchWindow {
    pub branch: usize,
    pub tau: (f64, f64),
    pub gamma: (f64, f64),
}

/// A constructed contour `B_σ` with the branch data it depends on.
#[derive(Debug, Clone)]
pub struct ContourSpec {
    pub frame: DirectionalFrame,
    pub profile: SigmaProfile,
    pub slices: usize,
    pub nodes_per_slice: usize,
    pub margins: MarginReport,
    pub retries: usize,
    pub windows: Vec<BranchWindow>,
    /// Samples of every branch from the anchor outward, ordered by `τ`.
    pub scans: Vec<Vec<BranchPoint>>,
}

impl ContourSpec {
    /// Quadrature nodes and Jacobians `(α, 1 + i ∂σ/∂s)` of a uniform rule on one slice.
    pub fn slice_nodes(&self, gamma: &[f64]) -> Vec<(Vec<C64>, C64, f64)> {
        let Some(seg) = clip_line(&self.frame, gamma) else {
            return Vec::new();
        };
        let n = self.nodes_per_slice;
        let h = seg.length() / n as f64;
        (0..n)
            .map(|k| {
                let s = seg.ell1 + (k as f64 + 0.5) * h;
                let (alpha, jac) = contour_point(&self.frame, &self.profile, gamma, s);
                (alpha, jac, h)
            })
            .collect()
    }
}

fn contour_point(frame: &DirectionalFrame, profile: &SigmaProfile, gamma: &[f64], s: f64) -> (Vec<C64>, C64) {
    let ar = frame.compose(gamma, s);
    let (sigma, gs) = profile.eval(&wrap_to_b(&ar));
    let dsig: f64 = frame.n_hat.iter().zip(&gs).map(|(n, g)| n * g).sum();
    let alpha = ar
        .iter()
        .zip(&frame.n_hat)
        .map(|(a, n)| C64::new(*a, sigma * n))
        .collect();
    (alpha, C64::new(1.0, dsig))
}

/// Reduces the real part of a complex quasi-momentum to `B`.
pub fn wrap_complex(alpha: &[C64]) -> Vec<C64> {
    alpha.iter().map(|z| C64::new(wrap_scalar(z.re), z.im)).collect()
}

fn real_part(alpha: &[C64]) -> Vec<f64> {
    alpha.iter().map(|z| z.re).collect()
}

/// Samples a branch outward from its anchor until `Im s` exceeds
/// `1.5 · sigma_max` or `γ` has moved by a full period.
pub fn scan_branch(
    model: &CellModel,
    frame: &DirectionalFrame,
    branch: &ComplexBranch,
    sigma_max: f64,
) -> Result<(Vec<BranchPoint>, bool)> {
    let mut tau = 1e-5;
    let mut p = branch.track_to(model, frame, tau, 4)?;
    let mut pts = vec![p.clone()];
    let mut complete = true;
    loop {
        if p.s.im > 1.5 * sigma_max || tau * tau > 1.0 {
            break;
        }
        let mut ratio: f64 = 1.04;
        let mut next = None;
        for _ in 0..6 {
            match branch.point_at(model, frame, tau * ratio, Some(&p)) {
                Ok(q) if q.s.im > 0.0 && (q.s - p.s).norm() < 0.05 + 0.5 * p.s.im => {
                    next = Some(q);
                    break;
                }
                _ => ratio = 1.0 + 0.5 * (ratio - 1.0),
            }
        }
        match next {
            Some(q) => {
                tau = q.tau;
                p = q;
                pts.push(p.clone());
            }
            None => {
                complete = false;
                break;
            }
        }
    }
    Ok((pts, complete))
}

fn height_gap(profile: &SigmaProfile, p: &BranchPoint) -> f64 {
    p.s.im - profile.eval(&wrap_to_b(&real_part(&p.alpha))).0
}

fn branch_gamma(frame: &DirectionalFrame, p: &BranchPoint) -> f64 {
    let re = wrap_to_b(&real_part(&p.alpha));
    frame.decompose(&re).0[0]
}

/// Intervals of `τ` on which the branch root lies below the contour.
fn find_windows(
    model: &CellModel,
    frame: &DirectionalFrame,
    branch: &ComplexBranch,
    scan: &[BranchPoint],
    complete: bool,
    profile: &SigmaProfile,
    index: usize,
) -> Result<Vec<BranchWindow>> {
    let mut out = Vec::new();
    let mut start: Option<(f64, f64)> = Some((0.0, branch.anchor_gamma));
    for w in scan.windows(2) {
        let (ha, hb) = (height_gap(profile, &w[0]), height_gap(profile, &w[1]));
        if (ha < 0.0) == (hb < 0.0) {
            continue;
        }
        let (mut lo, mut hi) = (w[0].tau, w[1].tau);
        let mut edge = w[1].clone();
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let q = branch.point_at(model, frame, mid, Some(&w[0]))?;
            if (height_gap(profile, &q) < 0.0) == (ha < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            edge = q;
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        let tau_edge = 0.5 * (lo + hi);
        let gamma_edge = branch_gamma(frame, &edge);
        match start.take() {
            Some((t0, g0)) => out.push(BranchWindow {
                branch: index,
                tau: (t0, tau_edge),
                gamma: (g0, gamma_edge),
            }),
            None => start = Some((tau_edge, gamma_edge)),
        }
    }
    if let Some((t0, _)) = start {
        let last = scan.last().expect("scan is nonempty");
        let reason = if complete { "reached the scan limit" } else { "stopped" };
        return Err(LapError::BranchContinuation(format!(
            "branch anchored at {:?} {reason} below the contour (tau from {t0:.3e} to {:.3e}, Im s = {:.3e})",
            branch.anchor, last.tau, last.s.im
        )));
    }
    Ok(out)
}

fn anchor_segments(level: &LevelSetData, scans: &[Vec<BranchPoint>], sigma2: f64) -> Vec<[[f64; 2]; 2]> {
    let pt = |a: &[f64]| [a[0], if a.len() > 1 { a[1] } else { 0.0 }];
    let mut segs = Vec::new();
    for seg in &level.segments {
        if level.dim == 1 {
            for p in seg.points.iter().filter(|p| p.tag == Tag::Plus) {
                segs.push([pt(&p.alpha), pt(&p.alpha)]);
            }
            continue;
        }
        for w in seg.points.windows(2) {
            let on = |t: Tag| t != Tag::Minus;
            if on(w[0].tag) && on(w[1].tag) && (w[0].tag == Tag::Plus || w[1].tag == Tag::Plus) {
                segs.push([pt(&w[0].alpha), pt(&w[1].alpha)]);
            }
        }
    }
    for scan in scans {
        let kept: Vec<[f64; 2]> = scan
            .iter()
            .take_while(|p| p.s.im <= 2.0 * sigma2)
            .map(|p| pt(&real_part(&p.alpha)))
            .collect();
        for w in kept.windows(2) {
            segs.push([w[0], w[1]]);
        }
    }
    segs
}

/// Builds `σ`, locates the branch windows and scans the contour for poles,
/// halving `sigma2` after a failed scan.
#[allow(clippy::too_many_arguments)]
pub fn build_contour(
    model: &CellModel,
    level: Option<&LevelSetData>,
    branches: &[ComplexBranch],
    frame: &DirectionalFrame,
    lambda: f64,
    params: &ContourParams,
) -> Result<ContourSpec> {
    let empty = level.map_or(true, |l| l.segments.is_empty());
    let sigma_max = params.sigma1.max(params.sigma2);
    let mut scans = Vec::with_capacity(branches.len());
    let mut complete = Vec::with_capacity(branches.len());
    for br in branches {
        let (s, c) = scan_branch(model, frame, br, sigma_max)?;
        scans.push(s);
        complete.push(c);
    }
    let mut sigma2 = params.sigma2;
    let mut worst = (f64::INFINITY, Vec::new());
    for retry in 0..=CONTOUR_RETRIES {
        let profile = if empty {
            SigmaProfile::constant(frame.dim, 0.0)
        } else {
            let segs = anchor_segments(level.expect("nonempty level set"), &scans, sigma2);
            SigmaProfile::new(frame.dim, params.sigma1, sigma2, params.halo, segs)
        };
        let mut windows = Vec::new();
        for (k, br) in branches.iter().enumerate() {
            windows.extend(find_windows(model, frame, br, &scans[k], complete[k], &profile, k)?);
        }
        let spec = ContourSpec {
            frame: frame.clone(),
            profile,
            slices: params.slices,
            nodes_per_slice: params.nodes_per_slice,
            margins: MarginReport::default(),
            retries: retry,
            windows,
            scans: scans.clone(),
        };
        if !params.check_poles {
            return Ok(spec);
        }
        let report = scan_margins(model, &spec, lambda);
        if report.1.is_none() {
            let mut spec = spec;
            spec.margins = report.0;
            return Ok(spec);
        }
        let (m, a) = report.1.expect("failure present");
        if m < worst.0 {
            worst = (m, a);
        }
        sigma2 *= 0.5;
    }
    Err(LapError::ContourConstruction {
        margin: worst.0,
        alpha: worst.1,
    })
}

fn check_gammas(frame: &DirectionalFrame, slices: usize) -> Vec<Vec<f64>> {
    match frame.tangential_range() {
        None => vec![Vec::new()],
        Some((lo, hi)) => (0..slices)
            .map(|i| vec![lo + (i as f64 + 0.5) * (hi - lo) / slices as f64])
            .collect(),
    }
}

/// Returns the report and, on failure, the worst unexplained margin and its `α`.
fn scan_margins(model: &CellModel, spec: &ContourSpec, lambda: f64) -> (MarginReport, Option<(f64, Vec<[f64; 2]>)>) {
    let gammas = check_gammas(&spec.frame, spec.slices);
    let nodes: Vec<Vec<C64>> = gammas
        .iter()
        .flat_map(|g| spec.slice_nodes(g).into_iter().map(|(a, _, _)| a))
        .collect();
    let halo_limit = 2.0 * spec.profile.halo;
    let has_set = !spec.profile.segments().is_empty();
    let results: Vec<(f64, bool)> = nodes
        .par_iter()
        .map(|a| {
            let a = wrap_complex(a);
            let pc = pole_free_check(model, &a, lambda);
            let near = has_set && spec.profile.distance(&real_part(&a)).0 < halo_limit;
            (pc.margin, near)
        })
        .collect();
    let mut report = MarginReport {
        nodes_checked: nodes.len(),
        min_margin: f64::INFINITY,
        ..Default::default()
    };
    let mut failure: Option<(f64, Vec<[f64; 2]>)> = None;
    for (a, (m, near)) in nodes.iter().zip(&results) {
        if *m < report.min_margin {
            report.min_margin = *m;
            report.worst_alpha = a.iter().map(|z| [z.re, z.im]).collect();
        }
        if *m >= crate::cell::POLE_FREE_MARGIN {
            continue;
        }
        if *near && *m >= SINGULAR_PIVOT {
            report.near_pole_nodes += 1;
            continue;
        }
        if failure.as_ref().map_or(true, |f| *m < f.0) {
            failure = Some((*m, a.iter().map(|z| [z.re, z.im]).collect()));
        }
    }
    (report, failure)
}

/// Shared inputs of the three terms.
pub struct LapContext<'a> {
    pub model: &'a CellModel,
    pub source: &'a PreparedSource,
    pub evaluator: &'a FieldEvaluator,
    pub lambda: f64,
}

impl LapContext<'_> {
    /// `w(α, x)` at every evaluation point, with `Re α` reduced to `B`.
    pub fn w(&self, alpha: &[C64], shift: C64) -> Result<Vec<C64>> {
        let a = wrap_complex(alpha);
        let g = self.source.vector(&a);
        if g.iter().all(|z| *z == ZERO) {
            return Ok(vec![ZERO; self.evaluator.len()]);
        }
        let c = self.model.solve(&a, shift, &g)?;
        Ok(self.evaluator.eval(&a, &c))
    }
}

/// Quadrature statistics of the contour term.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvanescentStats {
    pub evals: usize,
    pub error: f64,
    pub converged: bool,
    pub inner_unconverged: usize,
}

fn pole_hints(level: Option<&LevelSetData>, frame: &DirectionalFrame) -> Vec<((f64, f64), (f64, f64))> {
    let mut out = Vec::new();
    let Some(level) = level else { return out };
    for seg in &level.segments {
        for w in seg.points.windows(2) {
            let (a, b) = (&w[0].alpha, &w[1].alpha);
            let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            let e: Vec<f64> = m.iter().map(|v| v - wrap_scalar(*v)).collect();
            let a2: Vec<f64> = a.iter().zip(&e).map(|(x, s)| x - s).collect();
            let b2: Vec<f64> = b.iter().zip(&e).map(|(x, s)| x - s).collect();
            let (ga, sa) = frame.decompose(&a2);
            let (gb, sb) = frame.decompose(&b2);
            out.push(((ga.first().copied().unwrap_or(0.0), sa), (gb.first().copied().unwrap_or(0.0), sb)));
        }
    }
    out
}

/// `∫_{B_σ} w(α, x) dα` by nested adaptive Gauss–Kronrod quadrature along slices.
pub fn evanescent_term(
    ctx: &LapContext,
    contour: &ContourSpec,
    level: Option<&LevelSetData>,
    cfg: &LapConfig,
) -> Result<(Vec<C64>, EvanescentStats)> {
    let frame = &contour.frame;
    let width = ctx.evaluator.len();
    let shift = C64::new(ctx.lambda, 0.0);
    let hints = pole_hints(level, frame);
    let mut stats = EvanescentStats::default();
    let inner_opts = AdaptiveOptions {
        abs_tol: 0.1 * cfg.abs_tol,
        rel_tol: 0.1 * cfg.rel_tol,
        max_evals: cfg.inner_max_evals,
        min_width: 1e-13,
    };
    let anchor_s: Vec<(f64, f64)> = contour
        .scans
        .iter()
        .filter_map(|s| s.first())
        .map(|p| {
            let re = wrap_to_b(&real_part(&p.alpha));
            let (g, s) = frame.decompose(&re);
            (g.first().copied().unwrap_or(0.0), s)
        })
        .collect();
    let inner = |gamma: &[f64], evals: &mut usize, unconverged: &mut usize| -> Result<(Vec<C64>, f64)> {
        let Some(seg) = clip_line(frame, gamma) else {
            return Ok((vec![ZERO; width], 0.0));
        };
        if seg.length() <= 0.0 {
            return Ok((vec![ZERO; width], 0.0));
        }
        let mut breaks = vec![seg.ell1, seg.ell2];
        let g0 = gamma.first().copied().unwrap_or(0.0);
        for ((ga, sa), (gb, sb)) in &hints {
            let (lo, hi) = if ga <= gb { (*ga, *gb) } else { (*gb, *ga) };
            if frame.dim == 1 {
                breaks.push(*sa);
            } else if lo <= g0 && g0 <= hi && hi > lo {
                let t = (g0 - ga) / (gb - ga);
                breaks.push(sa + t * (sb - sa));
            }
        }
        for (ga, sa) in &anchor_s {
            if (ga - g0).abs() <= 0.1 {
                breaks.push(*sa);
            }
        }
        breaks.retain(|s| *s >= seg.ell1 && *s <= seg.ell2);
        let pieces = breaks.len().max(2) - 1;
        let panels = (contour.nodes_per_slice / 15 / pieces).max(1);
        let res = integrate_adaptive(
            |s| {
                let (alpha, jac) = contour_point(frame, &contour.profile, gamma, s);
                let w = ctx.w(&alpha, shift)?;
                Ok(w.into_iter().map(|v| v * jac).collect())
            },
            &breaks,
            panels,
            width,
            &inner_opts,
        )?;
        *evals += res.evals;
        if !res.converged {
            *unconverged += 1;
        }
        Ok((res.value, res.error))
    };
    if frame.dim == 1 {
        let (v, err) = inner(&[], &mut stats.evals, &mut stats.inner_unconverged)?;
        stats.error = err;
        stats.converged = stats.inner_unconverged == 0;
        return Ok((v, stats));
    }
    let (lo, hi) = frame.tangential_range().expect("two-dimensional frame");
    let mut breaks = vec![lo, hi];
    breaks.extend(frame.corner_gammas());
    breaks.extend(anchor_s.iter().map(|(g, _)| *g));
    for w in &contour.windows {
        breaks.push(w.gamma.0);
        breaks.push(w.gamma.1);
    }
    breaks.retain(|g| *g >= lo && *g <= hi);
    let pieces = {
        let mut b = breaks.clone();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b.len().max(2) - 1
    };
    let outer_opts = AdaptiveOptions {
        abs_tol: cfg.abs_tol,
        rel_tol: cfg.rel_tol,
        max_evals: cfg.max_evals,
        min_width: 1e-13,
    };
    let mut inner_evals = 0;
    let mut unconverged = 0;
    let res = integrate_adaptive(
        |g| {
            let (v, _) = inner(&[g], &mut inner_evals, &mut unconverged)?;
            Ok(v)
        },
        &breaks,
        (contour.slices / 15 / pieces).max(1),
        width,
        &outer_opts,
    )?;
    stats.evals = inner_evals;
    stats.error = res.error;
    stats.inner_unconverged = unconverged;
    stats.converged = res.converged && unconverged == 0;
    Ok((res.value, stats))
}

/// `Σ w_arc f̂ φ / ‖∇μ‖` over `F⁺` (the propagating term without `2πi`).
///
/// Quadrature nodes within `exclude_radius` of a degenerate point are dropped.
pub fn propagating_sum(ctx: &LapContext, level: &LevelSetData, exclude_radius: f64) -> Result<Vec<C64>> {
    let width = ctx.evaluator.len();
    let value = |alpha: &[f64], coeffs: &[C64], grad: &[f64]| -> Vec<C64> {
        let a: Vec<C64> = wrap_to_b(alpha).iter().map(|v| C64::new(*v, 0.0)).collect();
        let g = ctx.source.vector(&a);
        let fhat = cdot(coeffs, &g);
        let gnorm = dot(grad, grad).sqrt();
        ctx.evaluator.eval(&a, coeffs).into_iter().map(|p| fhat * p / gnorm).collect()
    };
    let mut total = vec![ZERO; width];
    if level.dim == 1 {
        for (_, p) in level.plus_points() {
            for (t, v) in total.iter_mut().zip(value(&p.alpha, &p.coeffs, &p.grad)) {
                *t += v;
            }
        }
        return Ok(total);
    }
    let d_points: Vec<Vec<f64>> = level.degenerate_points().iter().map(|(_, p)| p.alpha.clone()).collect();
    let near_d = |a: &[f64]| {
        d_points.iter().any(|d| {
            let dd: f64 = periodic_delta(a, d).iter().map(|v| v * v).sum();
            dd.sqrt() < exclude_radius
        })
    };
    let contributions: Vec<Vec<C64>> = level
        .segments
        .par_iter()
        .map(|seg| {
            let mut acc = vec![ZERO; width];
            let mut cache: Vec<Option<Vec<C64>>> = vec![None; seg.points.len()];
            for panel in seg.panels.iter().filter(|p| p.plus) {
                for (k, w) in panel.nodes.iter().zip(panel.weights) {
                    let p = &seg.points[*k];
                    if exclude_radius > 0.0 && near_d(&p.alpha) {
                        continue;
                    }
                    let v = cache[*k].get_or_insert_with(|| value(&p.alpha, &p.coeffs, &p.grad));
                    for (a, x) in acc.iter_mut().zip(v.iter()) {
                        *a += w * x;
                    }
                }
            }
            acc
        })
        .collect();
    for c in contributions {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    Ok(total)
}

/// `2πi Σ w_arc f̂ φ / ‖∇μ‖` over `F⁺`.
pub fn propagating_term(ctx: &LapContext, level: &LevelSetData, exclude_radius: f64) -> Result<Vec<C64>> {
    Ok(propagating_sum(ctx, level, exclude_radius)?
        .into_iter()
        .map(|v| TWO_PI_I * v)
        .collect())
}

/// Residue values `f̂ φ dS / (sgn(∂_s μ) G_s)` per unit `γ` at a branch point,
/// with `sgn(z) = z/|z|` and `dS = sqrt(1 + |s'|²) dγ`.
fn branch_density(ctx: &LapContext, p: &BranchPoint) -> Vec<C64> {
    let g = ctx.source.vector(&p.alpha);
    let coeff = p.eig.source_coeff(&g);
    let c: Vec<C64> = p.eig.right.iter().map(|z| z * coeff).collect();
    let sgn = p.dsmu / p.dsmu.norm();
    let ds_dgamma = (1.0 + (p.dgmu / p.dsmu).norm_sqr()).sqrt();
    let factor = ds_dgamma / (sgn * p.g_s);
    ctx.evaluator.eval(&p.alpha, &c).into_iter().map(|v| v * factor).collect()
}

/// `2πi Σ_windows ∫ dγ Res` over the parts of the complex branches lying
/// between the real zone and the contour.
pub fn complex_extension_term(
    ctx: &LapContext,
    frame: &DirectionalFrame,
    branches: &[ComplexBranch],
    contour: &ContourSpec,
    cfg: &LapConfig,
) -> Result<(Vec<C64>, usize)> {
    let width = ctx.evaluator.len();
    let mut total = vec![ZERO; width];
    let mut evals = 0;
    let opts = AdaptiveOptions {
        abs_tol: cfg.abs_tol,
        rel_tol: cfg.rel_tol,
        max_evals: 200_000,
        min_width: 1e-15,
    };
    for w in &contour.windows {
        let br = &branches[w.branch];
        let scan = &contour.scans[w.branch];
        let res = integrate_adaptive(
            |tau| {
                let k = scan.partition_point(|p| p.tau <= tau);
                let p = if k == 0 {
                    br.point_at(ctx.model, frame, tau, None)?
                } else {
                    br.point_at(ctx.model, frame, tau, Some(&scan[k - 1]))?
                };
                Ok(branch_density(ctx, &p).into_iter().map(|v| v * (2.0 * tau)).collect())
            },
            &[w.tau.0, w.tau.1],
            4,
            width,
            &opts,
        )?;
        if !res.converged {
            return Err(LapError::Quadrature(format!(
                "branch window {:?} did not converge (error {:.3e})",
                w.tau, res.error
            )));
        }
        evals += res.evals;
        for (t, v) in total.iter_mut().zip(res.value) {
            *t += TWO_PI_I * v;
        }
    }
    Ok((total, evals))
}

/// The three terms at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LapResult {
    pub x: Vec<f64>,
    pub evanescent: C64,
    pub propagating: C64,
    pub complex_ext: C64,
    pub total: C64,
}

impl LapResult {
    pub fn new(x: Vec<f64>, evanescent: C64, propagating: C64, complex_ext: C64) -> Self {
        Self {
            x,
            evanescent,
            propagating,
            complex_ext,
            total: evanescent + propagating + complex_ext,
        }
    }
}

/// Run diagnostics of [`lap_solve`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct LapDiagnostics {
    pub lambda: f64,
    pub n_hat: Vec<f64>,
    pub j_max: usize,
    pub num_bands: usize,
    pub j_lambda: Vec<usize>,
    pub min_grad_norm: Option<f64>,
    pub surface_points: usize,
    pub plus_panels: usize,
    pub degenerate_points: usize,
    pub branches: usize,
    pub windows: Vec<BranchWindow>,
    pub sigma1: f64,
    pub sigma2_used: f64,
    pub halo: f64,
    pub contour_retries: usize,
    pub margins: MarginReport,
    pub evanescent: EvanescentStats,
    pub complex_evals: usize,
    pub warnings: Vec<String>,
}

/// Solution values and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct LapSolution {
    pub results: Vec<LapResult>,
    pub diagnostics: LapDiagnostics,
}

fn auto_bands(model: &CellModel, lambda: f64) -> Result<usize> {
    let grid = AlphaGrid::uniform(model.dim, 8);
    let mut count = 0;
    for a in &grid.nodes {
        let ac: Vec<C64> = a.iter().map(|v| C64::new(*v, 0.0)).collect();
        let want = (count + 4).min(model.len());
        let b = eigensolve(&model.assemble(&ac), want)?;
        count = count.max(b.iter().filter(|e| e.mu <= lambda + 1.0).count());
    }
    Ok((count + 1).min(model.len()))
}

/// Everything `lap_solve` builds before evaluating terms; reusable for several
/// source or evaluation sets with the same medium, `λ` and direction.
pub struct LapSetup {
    pub model: CellModel,
    pub frame: DirectionalFrame,
    pub lambda: f64,
    pub regularity: RegularityReport,
    pub branches: Vec<ComplexBranch>,
    pub contour: ContourSpec,
    pub num_bands: usize,
    pub config: LapConfig,
}

impl LapSetup {
    pub fn new(medium: &MediumSpec, lambda: f64, frame: &DirectionalFrame, cfg: &LapConfig) -> Result<Self> {
        cfg.validate()?;
        if medium.dim != frame.dim {
            return Err(LapError::InvalidInput("medium and direction dimensions differ".into()));
        }
        let model = CellModel::new(medium, cfg.j_max)?;
        let num_bands = if cfg.num_bands == 0 {
            auto_bands(&model, lambda)?
        } else {
            cfg.num_bands.min(model.len())
        };
        let grid = sample_grid(&model, cfg.grid_n, num_bands, false)?;
        let regularity = check_regularity(&model, &grid, lambda, frame)?;
        if !regularity.regular {
            return Err(LapError::IrregularLambda(regularity.reasons.join("; ")));
        }
        let mut branches = Vec::new();
        if let Some(level) = &regularity.level_set {
            for (band, p) in level.degenerate_points() {
                branches.push(complex_extension(&model, &p.alpha, frame, band, lambda, 0.0, 0)?);
            }
        }
        let params = ContourParams {
            sigma1: cfg.sigma1,
            sigma2: cfg.sigma2,
            halo: cfg.halo,
            slices: cfg.slices,
            nodes_per_slice: cfg.nodes_per_slice,
            check_poles: !cfg.skip_pole_check,
        };
        let contour = build_contour(&model, regularity.level_set.as_ref(), &branches, frame, lambda, &params)?;
        Ok(Self {
            model,
            frame: frame.clone(),
            lambda,
            regularity,
            branches,
            contour,
            num_bands,
            config: cfg.clone(),
        })
    }

    /// Evaluates the three terms for one source at the given points.
    pub fn solve(&self, source: &SourceSpec, x_points: &[Vec<f64>]) -> Result<LapSolution> {
        let dim = self.frame.dim;
        if source.dim != dim {
            return Err(LapError::InvalidInput("source and medium dimensions differ".into()));
        }
        for x in x_points {
            if x.len() != dim || x.iter().any(|v| !v.is_finite()) {
                return Err(LapError::InvalidInput(format!("bad evaluation point {x:?}")));
            }
            if dot(x, &self.frame.n_hat) < 0.0 {
                return Err(LapError::InvalidInput(format!(
                    "evaluation point {x:?} lies behind the direction {:?}",
                    self.frame.n_hat
                )));
            }
        }
        let prepared = PreparedSource::new(source, self.config.j_max);
        let evaluator = FieldEvaluator::new(dim, self.config.j_max, x_points);
        let ctx = LapContext {
            model: &self.model,
            source: &prepared,
            evaluator: &evaluator,
            lambda: self.lambda,
        };
        let level = self.regularity.level_set.as_ref();
        let (evan, stats) = evanescent_term(&ctx, &self.contour, level, &self.config)?;
        let width = x_points.len();
        let prop = match level {
            Some(l) => propagating_term(&ctx, l, self.config.exclude_radius)?,
            None => vec![ZERO; width],
        };
        let (cext, complex_evals) = complex_extension_term(&ctx, &self.frame, &self.branches, &self.contour, &self.config)?;
        let results = x_points
            .iter()
            .enumerate()
            .map(|(k, x)| LapResult::new(x.clone(), evan[k], prop[k], cext[k]))
            .collect();
        let mut warnings = Vec::new();
        if let Some(w) = &self.model.truncation_warning {
            warnings.push(w.clone());
        }
        if !stats.converged {
            warnings.push(format!(
                "contour quadrature not fully converged (error {:.3e}, {} slices unconverged)",
                stats.error, stats.inner_unconverged
            ));
        }
        if self.contour.retries > 0 {
            warnings.push(format!("sigma2 reduced {} times", self.contour.retries));
        }
        let diagnostics = LapDiagnostics {
            lambda: self.lambda,
            n_hat: self.frame.n_hat.clone(),
            j_max: self.config.j_max,
            num_bands: self.num_bands,
            j_lambda: self.regularity.j_lambda.clone(),
            min_grad_norm: self.regularity.min_grad_norm,
            surface_points: level.map_or(0, |l| l.segments.iter().map(|s| s.points.len()).sum()),
            plus_panels: level.map_or(0, |l| l.segments.iter().flat_map(|s| &s.panels).filter(|p| p.plus).count()),
            degenerate_points: level.map_or(0, |l| l.degenerate_points().len()),
            branches: self.branches.len(),
            windows: self.contour.windows.clone(),
            sigma1: self.config.sigma1,
            sigma2_used: self.config.sigma2 * 0.5f64.powi(self.contour.retries as i32),
            halo: self.config.halo,
            contour_retries: self.contour.retries,
            margins: self.contour.margins.clone(),
            evanescent: stats,
            complex_evals,
            warnings,
        };
        Ok(LapSolution { results, diagnostics })
    }
}

/// The limiting-absorption solution at each evaluation point.
pub fn lap_solve(
    medium: &MediumSpec,
    source: &SourceSpec,
    lambda: f64,
    frame: &DirectionalFrame,
    x_points: &[Vec<f64>],
    cfg: &LapConfig,
) -> Result<LapSolution> {
    LapSetup::new(medium, lambda, frame, cfg)?.solve(source, x_points)
}

/// Solution of the damped problem `(L - λ - iε) u = f` by the trapezoid rule
/// over real `B` with at least `8/ε` nodes per axis.
pub fn damped_solve(
    medium: &MediumSpec,
    source: &SourceSpec,
    lambda: f64,
    epsilon: f64,
    x_points: &[Vec<f64>],
    n_alpha: usize,
    j_max: usize,
) -> Result<Vec<C64>> {
    if !(epsilon > 0.0) {
        return Err(LapError::InvalidInput("epsilon must be positive".into()));
    }
    let dim = medium.dim;
    let model = CellModel::new(medium, j_max)?;
    let prepared = PreparedSource::new(source, j_max);
    let evaluator = FieldEvaluator::new(dim, j_max, x_points);
    let n_min = (8.0 / epsilon).ceil();
    if n_min.powi(dim as i32) > MAX_DAMPED_NODES as f64 {
        return Err(LapError::InvalidInput(format!(
            "epsilon {epsilon:e} needs more than {MAX_DAMPED_NODES} quadrature nodes"
        )));
    }
    let n = n_alpha.max(n_min as usize);
    let grid = AlphaGrid::uniform(dim, n);
    let shift = C64::new(lambda, epsilon);
    let ctx = LapContext {
        model: &model,
        source: &prepared,
        evaluator: &evaluator,
        lambda,
    };
    let width = x_points.len();
    let sum = grid
        .nodes
        .par_chunks(256)
        .map(|chunk| -> Result<Vec<C64>> {
            let mut acc = vec![ZERO; width];
            for a in chunk {
                let ac: Vec<C64> = a.iter().map(|v| C64::new(*v, 0.0)).collect();
                for (t, v) in acc.iter_mut().zip(ctx.w(&ac, shift)?) {
                    *t += v;
                }
            }
            Ok(acc)
        })
        .try_reduce(
            || vec![ZERO; width],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let scale = 1.0 / (grid.nodes.len() as f64);
    Ok(sum.into_iter().map(|v| v * scale).collect())
}

/// An analytic dispersion branch along one slice.
pub trait SliceBranch: Sync {
    fn mu(&self, s: C64) -> C64;
    fn dmu(&self, s: C64) -> C64;
}

/// A branch given by two closures.
pub struct FnBranch<F, G> {
    pub mu: F,
    pub dmu: G,
}

impl<F, G> SliceBranch for FnBranch<F, G>
where
    F: Fn(C64) -> C64 + Sync,
    G: Fn(C64) -> C64 + Sync,
{
    fn mu(&self, s: C64) -> C64 {
        (self.mu)(s)
    }
    fn dmu(&self, s: C64) -> C64 {
        (self.dmu)(s)
    }
}

/// Both sides of the single-slice residue identity.
#[derive(Debug, Clone, Serialize)]
pub struct ResidueCheck {
    pub lhs: C64,
    pub rhs: C64,
    pub diff: f64,
    pub poles: Vec<C64>,
    pub residues: Vec<C64>,
    /// A pole lies within `1e-6` of the rectangle boundary.
    pub inconclusive: bool,
}

/// Compares `∫_{ℓ₁}^{ℓ₂} f̂/(μ-λ-iε) ds` with the integral over the raised
/// segment at height `σ`, the two vertical sides and the residues of the poles
/// enclosed between them.
pub fn residue_line_check(
    branch: &dyn SliceBranch,
    f_hat: &(dyn Fn(C64) -> C64 + Sync),
    lambda: f64,
    epsilon: f64,
    sigma: f64,
    ell: (f64, f64),
) -> Result<ResidueCheck> {
    if !(epsilon > 0.0 && sigma > 0.0 && ell.1 > ell.0) {
        return Err(LapError::InvalidInput("need epsilon > 0, sigma > 0 and a nonempty interval".into()));
    }
    let target = C64::new(lambda, epsilon);
    let f = |z: C64| f_hat(z) / (branch.mu(z) - target);
    // seeds: sign changes of Re μ - λ and local minima of |μ - λ| along the segment
    let n = 4000;
    let xs: Vec<f64> = (0..=n).map(|k| ell.0 + (ell.1 - ell.0) * k as f64 / n as f64).collect();
    let vals: Vec<C64> = xs.iter().map(|x| branch.mu(C64::new(*x, 0.0)) - lambda).collect();
    let mut seeds = Vec::new();
    for k in 0..n {
        if (vals[k].re > 0.0) != (vals[k + 1].re > 0.0) {
            seeds.push(C64::new(0.5 * (xs[k] + xs[k + 1]), 0.0));
        }
    }
    let mut poles: Vec<C64> = Vec::new();
    for seed in seeds {
        let mut z = seed;
        for _ in 0..100 {
            let step = (branch.mu(z) - target) / branch.dmu(z);
            z -= step;
            if step.norm() < 1e-15 * (1.0 + z.norm()) {
                break;
            }
        }
        if (branch.mu(z) - target).norm() < 1e-12 * (1.0 + lambda.abs()) && !poles.iter().any(|p| (p - z).norm() < 1e-10) {
            poles.push(z);
        }
    }
    let edge_tol = 1e-6;
    let mut inconclusive = false;
    let mut inside = Vec::new();
    let mut residues = Vec::new();
    for p in &poles {
        let near_edge = p.im.abs() < edge_tol
            || (p.im - sigma).abs() < edge_tol
            || (p.re - ell.0).abs() < edge_tol
            || (p.re - ell.1).abs() < edge_tol;
        if near_edge {
            inconclusive = true;
        }
        if p.im > 0.0 && p.im < sigma && p.re > ell.0 && p.re < ell.1 {
            inside.push(*p);
            residues.push(f_hat(*p) / branch.dmu(*p));
        }
    }
    let opts = AdaptiveOptions {
        abs_tol: 1e-14,
        rel_tol: 1e-13,
        max_evals: 2_000_000,
        min_width: 1e-15,
    };
    let mut breaks = vec![ell.0, ell.1];
    breaks.extend(poles.iter().map(|p| p.re).filter(|r| *r > ell.0 && *r < ell.1));
    let run = |g: &dyn Fn(f64) -> C64, a: f64, b: f64, br: &[f64]| -> Result<C64> {
        let mut pts = vec![a, b];
        pts.extend(br.iter().copied().filter(|v| *v > a.min(b) && *v < a.max(b)));
        let r = integrate_adaptive(|t| Ok(vec![g(t)]), &pts, 8, 1, &opts)?;
        if !r.converged {
            return Err(LapError::Quadrature("residue check quadrature did not converge".into()));
        }
        Ok(r.value[0])
    };
    let lhs = run(&|s| f(C64::new(s, 0.0)), ell.0, ell.1, &breaks)?;
    let top = run(&|s| f(C64::new(s, sigma)), ell.0, ell.1, &breaks)?;
    let i = C64::new(0.0, 1.0);
    let left = run(&|t| f(C64::new(ell.0, t)) * i, 0.0, sigma, &[])?;
    let right = run(&|t| f(C64::new(ell.1, t)) * i, 0.0, sigma, &[])?;
    let rhs = top + left - right + TWO_PI_I * residues.iter().sum::<C64>();
    Ok(ResidueCheck {
        lhs,
        rhs,
        diff: (lhs - rhs).norm(),
        poles: inside,
        residues,
        inconclusive,
    })
}
