//! Band structure over the Brillouin zone: tensor-grid sampling, analytic
//! relabeling along directional slices and regularity diagnostics for a level `λ`.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{band_gradient, cdot, eigensolve, hf_gradient, BandEigen, CellModel};
use crate::error::{LapError, Result};
use crate::fermi::{build_level_set, LevelSetData, Tag, GRAD_FLOOR};
use crate::lattice::{clip_line, wrap_to_b, DirectionalFrame, LineSegment};
use crate::medium::AlphaGrid;

/// Minimum eigenvector overlap between consecutive slice nodes on one branch.
pub const OVERLAP_MIN: f64 = 0.9;
/// Two overlaps closer than this make a match ambiguous.
pub const AMBIGUITY_GAP: f64 = 0.05;
/// Margin used when deciding whether a band range brackets `λ`.
pub const RANGE_MARGIN: f64 = 1e-6;

/// Bands at one grid node.
#[derive(Debug, Clone)]
pub struct BandNode {
    pub alpha: Vec<f64>,
    pub bands: Vec<BandEigen>,
    /// `∇μ_j` for simple bands, `None` at degeneracies.
    pub gradients: Vec<Option<Vec<f64>>>,
}

/// Bands sampled on the uniform grid `-1/2 + (k+1)/N` in every axis.
#[derive(Debug, Clone)]
pub struct BandGrid {
    pub dim: usize,
    pub n: usize,
    pub num_bands: usize,
    pub j_max: usize,
    /// Row-major in the axis index (`flat = i0 * n + i1`).
    pub nodes: Vec<BandNode>,
    /// `max |μ_j(α) - μ_j(-α)|` over matched node pairs.
    pub symmetry_defect: f64,
}

impl BandGrid {
    /// Coordinate of grid index `i` along any axis; `i` may exceed `n - 1`.
    pub fn coord(&self, i: usize) -> f64 {
        -0.5 + (i + 1) as f64 / self.n as f64
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        if self.dim == 1 {
            idx[0] % self.n
        } else {
            (idx[0] % self.n) * self.n + idx[1] % self.n
        }
    }

    /// `μ_band` (1-based band) at a flat node index.
    pub fn mu(&self, flat: usize, band: usize) -> f64 {
        self.nodes[flat].bands[band - 1].mu
    }

    /// Sampled `(min, max)` of a band and the nodes where they occur.
    pub fn band_range(&self, band: usize) -> ((f64, usize), (f64, usize)) {
        let mut lo = (f64::INFINITY, 0);
        let mut hi = (f64::NEG_INFINITY, 0);
        for k in 0..self.nodes.len() {
            let m = self.mu(k, band);
            if m < lo.0 {
                lo = (m, k);
            }
            if m > hi.0 {
                hi = (m, k);
            }
        }
        (lo, hi)
    }

    /// Largest gradient norm of a band over the grid (0 if none is simple).
    pub fn max_gradient(&self, band: usize) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| n.gradients[band - 1].as_ref())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Band `band` (1-based) of the model at real `α`, evaluated at `α` reduced to `B`.
pub fn band_at(model: &CellModel, alpha: &[f64], band: usize) -> Result<BandEigen> {
    let a: Vec<C64> = wrap_to_b(alpha).iter().map(|v| C64::new(*v, 0.0)).collect();
    let mut bands = eigensolve(&model.assemble(&a), band)?;
    bands
        .pop()
        .filter(|b| b.band_index == band)
        .ok_or_else(|| LapError::InvalidInput(format!("band {band} exceeds the basis size")))
}

/// Samples the first `num_bands` bands on an `N^dim` grid.
///
/// With `keep_vectors == false` the coefficient vectors are dropped after the
/// gradients are formed, which keeps large 2D grids small in memory.
pub fn sample_grid(model: &CellModel, n: usize, num_bands: usize, keep_vectors: bool) -> Result<BandGrid> {
    if n < 8 {
        return Err(LapError::InvalidInput(format!("grid needs at least 8 nodes per axis, got {n}")));
    }
    if num_bands == 0 || num_bands > model.len() {
        return Err(LapError::InvalidInput(format!(
            "num_bands must be in 1..={}, got {num_bands}",
            model.len()
        )));
    }
    let grid = AlphaGrid::uniform(model.dim, n);
    let nodes: Vec<BandNode> = grid
        .nodes
        .par_iter()
        .map(|alpha| -> Result<BandNode> {
            let a: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
            let mut bands = eigensolve(&model.assemble(&a), num_bands)?;
            let gradients = bands.iter().map(|b| hf_gradient(model, alpha, b).ok()).collect();
            if !keep_vectors {
                bands.iter_mut().for_each(|b| b.coeffs = Vec::new());
            }
            Ok(BandNode {
                alpha: alpha.clone(),
                bands,
                gradients,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = BandGrid {
        dim: model.dim,
        n,
        num_bands,
        j_max: model.j_max(),
        nodes,
        symmetry_defect: 0.0,
    };
    // node k sits at -1/2+(k+1)/N and its mirror at index N-2-k (mod N)
    let mirror = |k: usize| (2 * n - 2 - k) % n;
    let mut defect: f64 = 0.0;
    for flat in 0..out.nodes.len() {
        let other = if out.dim == 1 {
            mirror(flat)
        } else {
            mirror(flat / n) * n + mirror(flat % n)
        };
        for b in 1..=num_bands {
            defect = defect.max((out.mu(flat, b) - out.mu(other, b)).abs());
        }
    }
    out.symmetry_defect = defect;
    Ok(out)
}

/// One analytically continued band along a slice.
#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    pub mu: Vec<f64>,
    #[serde(skip)]
    pub coeffs: Vec<Vec<C64>>,
    pub dmu: Vec<f64>,
    /// Position of the branch in the sorted spectrum at each node (1-based).
    pub sorted_index: Vec<usize>,
}

/// Relabeled bands along `{γ t + s n : s ∈ [ℓ₁, ℓ₂]}`.
#[derive(Debug, Clone, Serialize)]
pub struct SliceBranches {
    pub gamma: Vec<f64>,
    pub segment: LineSegment,
    pub s_nodes: Vec<f64>,
    pub branches: Vec<Branch>,
    /// Node indices where the labels stop following the sort order.
    pub crossings: Vec<usize>,
}

/// Follows `num_branches` bands along a slice by greedy eigenvector-overlap matching.
pub fn relabel_slice(
    model: &CellModel,
    frame: &DirectionalFrame,
    gamma: &[f64],
    num_branches: usize,
    s_resolution: usize,
) -> Result<SliceBranches> {
    let segment = clip_line(frame, gamma)
        .filter(|s| s.length() > 0.0)
        .ok_or_else(|| LapError::InvalidInput(format!("slice {gamma:?} misses the zone")))?;
    if num_branches == 0 || s_resolution == 0 {
        return Err(LapError::InvalidInput("need at least one branch and one node".into()));
    }
    let s_nodes: Vec<f64> = if s_resolution == 1 {
        vec![0.5 * (segment.ell1 + segment.ell2)]
    } else {
        (0..s_resolution)
            .map(|k| segment.ell1 + segment.length() * k as f64 / (s_resolution - 1) as f64)
            .collect()
    };
    let candidates = (num_branches + 2).min(model.len());
    let num_branches = num_branches.min(candidates);
    let spectra: Vec<(Vec<f64>, Vec<BandEigen>)> = s_nodes
        .par_iter()
        .map(|s| -> Result<_> {
            let alpha = frame.compose(gamma, *s);
            let a: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
            Ok((alpha, eigensolve(&model.assemble(&a), candidates)?))
        })
        .collect::<Result<_>>()?;

    let n_hat = &frame.n_hat;
    let dmu_of = |alpha: &[f64], c: &[C64]| -> f64 {
        band_gradient(model, alpha, c).iter().zip(n_hat).map(|(g, n)| g * n).sum()
    };
    let mut branches: Vec<Branch> = (0..num_branches)
        .map(|b| {
            let e = &spectra[0].1[b];
            Branch {
                mu: vec![e.mu],
                coeffs: vec![e.coeffs.clone()],
                dmu: vec![dmu_of(&spectra[0].0, &e.coeffs)],
                sorted_index: vec![b + 1],
            }
        })
        .collect();
    let mut crossings = Vec::new();
    for k in 1..s_nodes.len() {
        let (alpha, cands) = &spectra[k];
        let overlaps: Vec<Vec<f64>> = branches
            .iter()
            .map(|br| {
                let prev = br.coeffs.last().expect("branch has a node");
                cands.iter().map(|c| cdot(prev, &c.coeffs).norm()).collect()
            })
            .collect();
        let mut triples: Vec<(f64, usize, usize)> = overlaps
            .iter()
            .enumerate()
            .flat_map(|(b, row)| row.iter().enumerate().map(move |(c, o)| (*o, b, c)))
            .collect();
        triples.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut assigned = vec![usize::MAX; branches.len()];
        let mut used = vec![false; cands.len()];
        for (_, b, c) in triples {
            if assigned[b] == usize::MAX && !used[c] {
                assigned[b] = c;
                used[c] = true;
            }
        }
        for (b, row) in overlaps.iter().enumerate() {
            let first = row[assigned[b]];
            let second = row
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != assigned[b])
                .map(|(_, o)| *o)
                .fold(0.0, f64::max);
            if first < OVERLAP_MIN || first - second < AMBIGUITY_GAP {
                return Err(LapError::CrossingAmbiguity {
                    s: s_nodes[k],
                    first,
                    second,
                });
            }
        }
        let mut permuted = false;
        for (b, br) in branches.iter_mut().enumerate() {
            let e = &cands[assigned[b]];
            let prev = br.coeffs.last().expect("branch has a node");
            let ph = cdot(&e.coeffs, prev);
            let u = if ph.norm() > 0.0 { ph / ph.norm() } else { C64::new(1.0, 0.0) };
            let c: Vec<C64> = e.coeffs.iter().map(|z| z * u).collect();
            if e.band_index != *br.sorted_index.last().expect("branch has a node") {
                permuted = true;
            }
            br.dmu.push(dmu_of(alpha, &c));
            br.mu.push(e.mu);
            br.coeffs.push(c);
            br.sorted_index.push(e.band_index);
        }
        if permuted {
            crossings.push(k);
        }
    }
    Ok(SliceBranches {
        gamma: gamma.to_vec(),
        segment,
        s_nodes,
        branches,
        crossings,
    })
}

/// Refined extremum of one band.
#[derive(Debug, Clone, Serialize)]
pub struct BandExtremum {
    pub band: usize,
    pub maximum: bool,
    pub alpha: Vec<f64>,
    pub value: f64,
}

/// Outcome of [`check_regularity`].
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub lambda: f64,
    /// Bands (1-based) whose range contains `λ`.
    pub j_lambda: Vec<usize>,
    pub extrema: Vec<BandExtremum>,
    /// Smallest `‖∇μ‖` over refined level-set points, if any.
    pub min_grad_norm: Option<f64>,
    /// Points where `∇μ·n` vanishes, per band.
    pub degenerate_points: Vec<(usize, usize)>,
    pub regular: bool,
    pub reasons: Vec<String>,
    #[serde(skip)]
    pub level_set: Option<LevelSetData>,
}

fn golden_max(mut f: impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)> {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1)?;
        }
    }
    Ok(if f1 > f2 { (x1, f1) } else { (x2, f2) })
}

/// Coordinate-wise golden-section refinement of a band extremum starting from a grid node.
pub fn refine_extremum(
    model: &CellModel,
    start: &[f64],
    band: usize,
    maximum: bool,
    h: f64,
) -> Result<BandExtremum> {
    let sign = if maximum { 1.0 } else { -1.0 };
    let mut alpha = start.to_vec();
    let mut value = band_at(model, &alpha, band)?.mu;
    for _sweep in 0..3 {
        for axis in 0..alpha.len() {
            let base = alpha.clone();
            let eval = |t: f64| -> Result<f64> {
                let mut p = base.clone();
                p[axis] = t;
                Ok(sign * band_at(model, &p, band)?.mu)
            };
            let (t, v) = golden_max(eval, base[axis] - h, base[axis] + h, 1e-10)?;
            if sign * v > sign * value {
                alpha[axis] = t;
                value = sign * v;
            }
        }
    }
    Ok(BandExtremum {
        band,
        maximum,
        alpha,
        value,
    })
}

/// Decides whether `λ` is regular for the sampled bands and direction.
///
/// `λ` is irregular when it lies within `1e-6` of a (refined) band extremum,
/// when the level set contains a point with `‖∇μ‖` below the gradient floor or
/// a multiple eigenvalue, or, in one dimension, when `μ' = 0` on the level set.
pub fn check_regularity(
    model: &CellModel,
    grid: &BandGrid,
    lambda: f64,
    frame: &DirectionalFrame,
) -> Result<RegularityReport> {
    let h = 1.0 / grid.n as f64;
    let mut extrema = Vec::new();
    let mut j_lambda = Vec::new();
    let mut reasons = Vec::new();
    for band in 1..=grid.num_bands {
        let ((lo, lo_node), (hi, hi_node)) = grid.band_range(band);
        // the true extremum can differ from the sampled one by about |∇μ| h
        let slack = grid.max_gradient(band) * h * (grid.dim as f64).sqrt() + RANGE_MARGIN;
        let mut lo_v = lo;
        let mut hi_v = hi;
        if (lambda - lo).abs() <= slack {
            let e = refine_extremum(model, &grid.nodes[lo_node].alpha, band, false, h)?;
            lo_v = e.value.min(lo);
            extrema.push(e);
        }
        if (lambda - hi).abs() <= slack {
            let e = refine_extremum(model, &grid.nodes[hi_node].alpha, band, true, h)?;
            hi_v = e.value.max(hi);
            extrema.push(e);
        }
        if lambda >= lo_v - RANGE_MARGIN && lambda <= hi_v + RANGE_MARGIN {
            j_lambda.push(band);
        }
        for v in [lo_v, hi_v] {
            if (lambda - v).abs() <= RANGE_MARGIN {
                reasons.push(format!("lambda is within 1e-6 of an extremum of band {band} ({v:.12})"));
            }
        }
    }
    let mut min_grad_norm = None;
    let mut degenerate_points = Vec::new();
    let mut level_set = None;
    if !j_lambda.is_empty() {
        let level = build_level_set(model, grid, lambda, frame, &j_lambda)?;
        for msg in &level.dropped {
            reasons.push(format!("level-set point not resolved: {msg}"));
        }
        for &band in &j_lambda {
            let mut count = 0;
            for seg in level.segments.iter().filter(|s| s.band == band) {
                let npts = if seg.closed { seg.points.len() - 1 } else { seg.points.len() };
                for p in &seg.points[..npts] {
                    let g = p.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                    min_grad_norm = Some(min_grad_norm.map_or(g, |m: f64| m.min(g)));
                    if p.tag == Tag::Degenerate {
                        count += 1;
                    }
                }
            }
            degenerate_points.push((band, count));
            if grid.dim == 1 && count > 0 {
                reasons.push(format!("band {band} has mu' = 0 on the level set"));
            }
        }
        if let Some(g) = min_grad_norm {
            if g < GRAD_FLOOR {
                reasons.push(format!("gradient norm {g:.3e} below floor on the level set"));
            }
        }
        if level.multiple_points > 0 {
            reasons.push(format!("{} level-set points lie on multiple eigenvalues", level.multiple_points));
        }
        level_set = Some(level);
    }
    Ok(RegularityReport {
        lambda,
        j_lambda,
        extrema,
        min_grad_norm,
        degenerate_points,
        regular: reasons.is_empty(),
        reasons,
        level_set,
    })
}
