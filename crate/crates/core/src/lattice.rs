//! Geometry of the periodicity cell `Ω = (-π, π]^n` and of the Brillouin zone
//! `B = (-1/2, 1/2]^n`: directional frames, line clipping, the boundary
//! translation map and reduction modulo the dual lattice.

use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};

/// Absolute tolerance for deciding that a point lies on a face of `B`.
pub const FACE_TOL: f64 = 1e-12;

/// Orthonormal frame `(t_1, …, t_{n-1}, n)` attached to an observation direction.
///
/// A point of the Brillouin zone is written `α = Σ γ_k t_k + s n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalFrame {
    pub dim: usize,
    pub n_hat: Vec<f64>,
    pub tangents: Vec<Vec<f64>>,
}

/// Intersection of the line `{γ t + s n}` with the closed zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub gamma: Vec<f64>,
    pub ell1: f64,
    pub ell2: f64,
}

impl LineSegment {
    pub fn length(&self) -> f64 {
        self.ell2 - self.ell1
    }
}

/// A face `C_axis^±` of the zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

/// Builds the frame for a nonzero direction in one or two dimensions.
///
/// In two dimensions the tangent is the counter-clockwise rotation of `n`.
pub fn build_frame(n_hat: &[f64]) -> Result<DirectionalFrame> {
    let dim = n_hat.len();
    if !(1..=2).contains(&dim) {
        return Err(LapError::InvalidDirection(format!(
            "dimension {dim} is not supported"
        )));
    }
    if n_hat.iter().any(|v| !v.is_finite()) {
        return Err(LapError::InvalidDirection("non-finite component".into()));
    }
    let norm = n_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LapError::InvalidDirection("zero vector".into()));
    }
    let n: Vec<f64> = n_hat.iter().map(|v| v / norm).collect();
    let tangents = if dim == 2 {
        vec![vec![-n[1], n[0]]]
    } else {
        Vec::new()
    };
    Ok(DirectionalFrame {
        dim,
        n_hat: n,
        tangents,
    })
}

impl DirectionalFrame {
    /// `α = γ t + s n`.
    pub fn compose(&self, gamma: &[f64], s: f64) -> Vec<f64> {
        let mut alpha: Vec<f64> = self.n_hat.iter().map(|v| v * s).collect();
        for (g, t) in gamma.iter().zip(&self.tangents) {
            for (a, tk) in alpha.iter_mut().zip(t) {
                *a += g * tk;
            }
        }
        alpha
    }

    /// Inverse of [`compose`](Self::compose).
    pub fn decompose(&self, alpha: &[f64]) -> (Vec<f64>, f64) {
        let s = dot(alpha, &self.n_hat);
        let gamma = self.tangents.iter().map(|t| dot(alpha, t)).collect();
        (gamma, s)
    }

    /// Range of the tangential coordinate over the closed zone (empty for `dim = 1`).
    pub fn tangential_range(&self) -> Option<(f64, f64)> {
        if self.dim != 2 {
            return None;
        }
        let t = &self.tangents[0];
        let half = 0.5 * (t[0].abs() + t[1].abs());
        Some((-half, half))
    }

    /// Tangential coordinates of the four corners; the slice length has kinks there.
    pub fn corner_gammas(&self) -> Vec<f64> {
        if self.dim != 2 {
            return Vec::new();
        }
        let t = &self.tangents[0];
        let mut out: Vec<f64> = [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]
            .iter()
            .map(|(a, b)| a * t[0] + b * t[1])
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        out
    }

    /// True when the slices run parallel to a coordinate axis, so that the two
    /// endpoints of every slice are images of each other under the translation map.
    pub fn is_axis_aligned(&self) -> bool {
        self.n_hat.iter().filter(|v| v.abs() > 1e-14).count() == 1
    }
}

/// Intersects the line `{γ t + s n : s ∈ ℝ}` with the closed square `[-1/2, 1/2]²`.
///
/// In one dimension the segment is always `[-1/2, 1/2]`.
pub fn clip_line(frame: &DirectionalFrame, gamma: &[f64]) -> Option<LineSegment> {
    let origin = frame.compose(gamma, 0.0);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, n) in origin.iter().zip(&frame.n_hat) {
        if n.abs() < 1e-15 {
            if p.abs() > 0.5 {
                return None;
            }
            continue;
        }
        let a = (-0.5 - p) / n;
        let b = (0.5 - p) / n;
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    if hi - lo <= 1e-14 {
        return None;
    }
    Some(LineSegment {
        gamma: gamma.to_vec(),
        ell1: lo,
        ell2: hi,
    })
}

/// Face of the closed zone containing `alpha`; the lowest axis wins at edges.
pub fn face_of(alpha: &[f64]) -> Option<Face> {
    if alpha.iter().any(|v| v.abs() > 0.5 + FACE_TOL) {
        return None;
    }
    alpha.iter().enumerate().find_map(|(axis, v)| {
        ((v.abs() - 0.5).abs() <= FACE_TOL).then_some(Face {
            axis,
            positive: *v > 0.0,
        })
    })
}

/// Boundary translation `T`: flips the coordinate normal to the face containing `alpha`.
pub fn translate_boundary(alpha: &[f64]) -> Result<Vec<f64>> {
    let face = face_of(alpha).ok_or_else(|| LapError::NotOnBoundary {
        point: alpha.to_vec(),
    })?;
    let mut out = alpha.to_vec();
    out[face.axis] = -out[face.axis];
    Ok(out)
}

/// Reduces each coordinate modulo 1 into `(-1/2, 1/2]`.
pub fn wrap_to_b(alpha: &[f64]) -> Vec<f64> {
    alpha.iter().map(|&v| wrap_scalar(v)).collect()
}

pub(crate) fn wrap_scalar(v: f64) -> f64 {
    v - (v - 0.5).ceil()
}

/// Periodic (minimum-image) displacement `a - b` on the torus `ℝⁿ/ℤⁿ`.
pub(crate) fn periodic_delta(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d - d.round()
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn frame_rotation_rule() {
        let f = build_frame(&[1.0, 0.0]).unwrap();
        assert!(close(&f.tangents[0], &[0.0, 1.0], 1e-15));
        let f = build_frame(&[0.0, 1.0]).unwrap();
        assert!(close(&f.tangents[0], &[-1.0, 0.0], 1e-15));
        let f = build_frame(&[1.0, 1.0]).unwrap();
        let r = 0.5f64.sqrt();
        assert!(close(&f.tangents[0], &[-r, r], 1e-15));
        assert!(dot(&f.tangents[0], &f.n_hat).abs() < 1e-15);
        assert!((norm(&f.n_hat) - 1.0).abs() < 1e-15);
        assert!(build_frame(&[0.3]).unwrap().tangents.is_empty());
    }

    #[test]
    fn frame_rejects_zero_and_bad_dims() {
        assert!(matches!(
            build_frame(&[0.0, 0.0]),
            Err(LapError::InvalidDirection(_))
        ));
        assert!(build_frame(&[1.0, 0.0, 0.0]).is_err());
        assert!(build_frame(&[]).is_err());
    }

    #[test]
    fn compose_decompose_roundtrip() {
        let f = build_frame(&[0.6, -0.8]).unwrap();
        let a = f.compose(&[0.17], -0.31);
        let (g, s) = f.decompose(&a);
        assert!((g[0] - 0.17).abs() < 1e-15 && (s + 0.31).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let f = build_frame(&[1.0, 0.0]).unwrap();
        let seg = clip_line(&f, &[0.0]).unwrap();
        assert!((seg.ell1 + 0.5).abs() < 1e-15 && (seg.ell2 - 0.5).abs() < 1e-15);
        assert!(clip_line(&f, &[0.7]).is_none());

        let f = build_frame(&[1.0, 1.0]).unwrap();
        let seg = clip_line(&f, &[0.0]).unwrap();
        let h = 0.5f64.sqrt();
        assert!((seg.ell1 + h).abs() < 1e-14 && (seg.ell2 - h).abs() < 1e-14);

        let f = build_frame(&[-1.0]).unwrap();
        let seg = clip_line(&f, &[]).unwrap();
        assert_eq!((seg.ell1, seg.ell2), (-0.5, 0.5));
    }

    #[test]
    fn clip_matches_brute_force() {
        let f = build_frame(&[0.3, 0.7]).unwrap();
        for k in 0..41 {
            let g = -0.6 + 1.2 * k as f64 / 40.0;
            // dense scan along the line
            let mut inside: Vec<f64> = Vec::new();
            for i in 0..=200_000 {
                let s = -1.0 + 2.0 * i as f64 / 200_000.0;
                let a = f.compose(&[g], s);
                if a.iter().all(|v| v.abs() <= 0.5) {
                    inside.push(s);
                }
            }
            match clip_line(&f, &[g]) {
                Some(seg) => {
                    assert!((inside[0] - seg.ell1).abs() < 2e-5);
                    assert!((inside.last().unwrap() - seg.ell2).abs() < 2e-5);
                }
                None => assert!(inside.len() <= 1),
            }
        }
    }

    #[test]
    fn endpoints_on_distinct_faces() {
        for n in [[1.0, 0.0], [1.0, 1.0], [0.3, -0.7], [-0.2, 0.9]] {
            let f = build_frame(&n).unwrap();
            let (lo, hi) = f.tangential_range().unwrap();
            for k in 1..50 {
                let g = lo + (hi - lo) * k as f64 / 50.0;
                if let Some(seg) = clip_line(&f, &[g]) {
                    let a = face_of(&f.compose(&[g], seg.ell1)).unwrap();
                    let b = face_of(&f.compose(&[g], seg.ell2)).unwrap();
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn translation_examples() {
        assert_eq!(translate_boundary(&[0.5, 0.3]).unwrap(), vec![-0.5, 0.3]);
        assert_eq!(translate_boundary(&[0.2, -0.5]).unwrap(), vec![0.2, 0.5]);
        let p = [0.5, 0.3];
        assert_eq!(translate_boundary(&translate_boundary(&p).unwrap()).unwrap(), p);
        assert!(matches!(
            translate_boundary(&[0.1, 0.2]),
            Err(LapError::NotOnBoundary { .. })
        ));
    }

    #[test]
    fn left_endpoints_map_to_right_endpoints() {
        for n in [[1.0, 0.0], [1.0, 1.0], [0.3, -0.7], [-0.8, 0.25]] {
            let f = build_frame(&n).unwrap();
            let (lo, hi) = f.tangential_range().unwrap();
            for k in 1..40 {
                let g = lo + (hi - lo) * (k as f64 + 0.37) / 40.5;
                let Some(seg) = clip_line(&f, &[g]) else { continue };
                let left = f.compose(&[g], seg.ell1);
                let image = translate_boundary(&left).unwrap();
                let (g2, s2) = f.decompose(&image);
                let seg2 = clip_line(&f, &g2).unwrap();
                assert!((s2 - seg2.ell2).abs() < 1e-12, "n={n:?} g={g}");
            }
        }
    }

    #[test]
    fn wrap_examples() {
        assert!(close(&wrap_to_b(&[0.7, 0.0]), &[-0.3, 0.0], 1e-15));
        assert_eq!(wrap_to_b(&[0.25, -0.25]), vec![0.25, -0.25]);
        assert_eq!(wrap_to_b(&[-0.5, 0.5]), vec![0.5, 0.5]);
        let w = wrap_to_b(&[-0.5 - 1e-15, 0.2]);
        assert!((w[0] - 0.5).abs() < 1e-14 && w[1] == 0.2);
    }

    #[test]
    fn wrap_lattice_invariance() {
        for &(a, b) in &[(0.13, -0.42), (2.49, -7.1), (-0.5, 0.5), (1e-3, 3.999)] {
            let base = wrap_to_b(&[a, b]);
            for e in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]] {
                let w = wrap_to_b(&[a + e[0], b + e[1]]);
                assert!(close(&w, &base, 1e-12));
            }
            assert!(base.iter().all(|v| *v > -0.5 && *v <= 0.5));
        }
    }
}
