//! Randomised invariants of the cell operator, level sets, contour profile
//! and damped solutions.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use periodic_lap::bands::{check_regularity, sample_grid};
use periodic_lap::cell::{cdot, eigensolve, CellModel, FieldEvaluator};
use periodic_lap::fermi::{Tag, DEGENERATE_TOL};
use periodic_lap::lap::{damped_solve, LapContext, SigmaProfile};
use periodic_lap::lattice::{build_frame, wrap_to_b};
use periodic_lap::medium::{MediumSpec, PreparedSource, SourceSpec};
use periodic_lap::quadrature::gauss_legendre_on;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Real media with a few low modes: `A = I + Σ 2Re(c_j e^{ij·x}) S_j`,
/// `V = v0 + Σ 2Re(v_j e^{ij·x})`, with `‖A - I‖ ≤ 0.45`.
fn medium_2d() -> impl Strategy<Value = MediumSpec> {
    let mode = (
        -1.0..1.0f64,
        -1.0..1.0f64,
        prop::array::uniform3(-1.0..1.0f64),
        -0.5..0.5f64,
        -0.5..0.5f64,
    );
    (prop::collection::vec(mode, 3), -0.5..0.5f64).prop_map(|(modes, v0)| {
        let dirs = [vec![1, 0], vec![0, 1], vec![1, 1]];
        let mut a = BTreeMap::new();
        a.insert(vec![0, 0], vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let mut v = BTreeMap::new();
        v.insert(vec![0, 0], c(v0, 0.0));
        for (j, (cr, ci, s, vr, vi)) in dirs.iter().zip(modes) {
            // |c| ≤ 1/√2 · 0.075, ‖S‖ ≤ √3, three modes, two terms each
            let cj = c(cr, ci) * 0.053;
            let snorm = (s[0] * s[0] + 2.0 * s[1] * s[1] + s[2] * s[2]).sqrt().max(1.0);
            let sm = [s[0] / snorm, s[1] / snorm, s[1] / snorm, s[2] / snorm];
            let neg: Vec<i32> = j.iter().map(|x| -x).collect();
            a.insert(j.clone(), sm.iter().map(|x| cj * x).collect());
            a.insert(neg.clone(), sm.iter().map(|x| cj.conj() * x).collect());
            v.insert(j.clone(), c(vr, vi));
            v.insert(neg, c(vr, -vi));
        }
        MediumSpec::new(2, a, v, 0.5).expect("valid random medium")
    })
}

fn real_alpha(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5..0.5f64, dim)
}

fn as_complex(a: &[f64]) -> Vec<C64> {
    a.iter().map(|x| c(*x, 0.0)).collect()
}

fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

const J: usize = 3;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn hermitian_at_real_alpha(m in medium_2d(), alpha in real_alpha(2)) {
        let h = CellModel::new(&m, J).unwrap().assemble(&as_complex(&alpha));
        prop_assert!(h.hermiticity_defect() <= 1e-12 * h.norm());
    }

    #[test]
    fn conjugate_alpha_gives_adjoint(m in medium_2d(), re in real_alpha(2), im in prop::collection::vec(-0.3..0.3f64, 2)) {
        let model = CellModel::new(&m, J).unwrap();
        let a: Vec<C64> = re.iter().zip(&im).map(|(x, y)| c(*x, *y)).collect();
        let ac: Vec<C64> = a.iter().map(|z| z.conj()).collect();
        let h = model.assemble(&a).to_dense();
        let hc = model.assemble(&ac).to_dense();
        prop_assert!((h.adjoint() - hc).norm() <= 1e-12 * h.norm());
    }

    #[test]
    fn matrix_free_apply_matches_assembly(m in medium_2d(), re in real_alpha(2), im in prop::collection::vec(-0.3..0.3f64, 2), seed in any::<u64>()) {
        let model = CellModel::new(&m, J).unwrap();
        let a: Vec<C64> = re.iter().zip(&im).map(|(x, y)| c(*x, *y)).collect();
        let n = model.len();
        let v: Vec<C64> = (0..n)
            .map(|k| {
                let t = (seed.wrapping_add(k as u64) % 1000) as f64 / 1000.0;
                c((7.0 * t).sin(), (3.0 * t).cos())
            })
            .collect();
        let h = model.assemble(&a);
        let direct = h.matvec(&v);
        let free = model.h_apply(&a, &v);
        let diff: Vec<C64> = direct.iter().zip(&free).map(|(x, y)| x - y).collect();
        prop_assert!(vec_norm(&diff) <= 1e-12 * h.norm() * vec_norm(&v));
    }

    #[test]
    fn eigenpairs_have_small_residuals(m in medium_2d(), alpha in real_alpha(2)) {
        let h = CellModel::new(&m, J).unwrap().assemble(&as_complex(&alpha));
        let bands = eigensolve(&h, 6).unwrap();
        let scale = h.norm();
        for w in bands.windows(2) {
            prop_assert!(w[0].mu <= w[1].mu);
        }
        for b in &bands {
            prop_assert!((vec_norm(&b.coeffs) - 1.0).abs() < 1e-12);
            let hv = h.matvec(&b.coeffs);
            let r: Vec<C64> = hv.iter().zip(&b.coeffs).map(|(x, v)| x - v * b.mu).collect();
            prop_assert!(vec_norm(&r) <= 1e-10 * scale);
        }
    }

    #[test]
    fn bands_are_even_in_alpha(m in medium_2d(), alpha in real_alpha(2)) {
        let model = CellModel::new(&m, J).unwrap();
        let neg: Vec<f64> = alpha.iter().map(|x| -x).collect();
        let p = eigensolve(&model.assemble(&as_complex(&alpha)), 4).unwrap();
        let q = eigensolve(&model.assemble(&as_complex(&neg)), 4).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a.mu - b.mu).abs() <= 1e-10 * (1.0 + a.mu.abs()));
        }
    }

    #[test]
    fn shifted_solve_inverts(m in medium_2d(), re in real_alpha(2), im in prop::collection::vec(0.05..0.3f64, 2), lambda in 0.0..2.0f64) {
        let model = CellModel::new(&m, J).unwrap();
        let a: Vec<C64> = re.iter().zip(&im).map(|(x, y)| c(*x, *y)).collect();
        let g: Vec<C64> = (0..model.len()).map(|k| c(1.0 / (1.0 + k as f64), 0.5)).collect();
        let shift = c(lambda, 0.0);
        if let Ok(u) = model.solve(&a, shift, &g) {
            let hu = model.h_apply(&a, &u);
            let r: Vec<C64> = hu.iter().zip(&u).zip(&g).map(|((x, y), z)| x - shift * y - z).collect();
            let h = model.assemble(&a).norm();
            prop_assert!(vec_norm(&r) <= 1e-9 * h * vec_norm(&u).max(1.0));
        }
    }

    #[test]
    fn source_weighted_field_is_gauge_invariant(m in medium_2d(), alpha in real_alpha(2), phase in 0.0..(2.0 * PI)) {
        let model = CellModel::new(&m, J).unwrap();
        let ac = as_complex(&alpha);
        let bands = eigensolve(&model.assemble(&ac), 2).unwrap();
        let g = PreparedSource::new(&SourceSpec::gaussian(2, 0.7, 3), J).vector(&ac);
        let ev = FieldEvaluator::new(2, J, &[vec![0.4, -1.1]]);
        let b = &bands[0];
        let turned: Vec<C64> = b.coeffs.iter().map(|z| z * C64::from_polar(1.0, phase)).collect();
        let f = |v: &[C64]| cdot(v, &g) * ev.eval(&ac, v)[0];
        prop_assert!((f(&b.coeffs) - f(&turned)).norm() <= 1e-12 * (1.0 + f(&b.coeffs).norm()));
    }

    #[test]
    fn cell_solution_is_periodic_across_faces(m in medium_2d(), re in real_alpha(2), im in prop::collection::vec(0.05..0.2f64, 2), k in 0usize..2) {
        let model = CellModel::new(&m, J).unwrap();
        let source = PreparedSource::new(&SourceSpec::gaussian(2, 0.7, 3), J);
        let evaluator = FieldEvaluator::new(2, J, &[vec![2.0, 0.5]]);
        let ctx = LapContext { model: &model, source: &source, evaluator: &evaluator, lambda: 0.5 };
        let a: Vec<C64> = re.iter().zip(&im).map(|(x, y)| c(*x, *y)).collect();
        let mut b = a.clone();
        b[k] += 1.0;
        let shift = c(0.5, 0.0);
        let (u, v) = (ctx.w(&a, shift).unwrap()[0], ctx.w(&b, shift).unwrap()[0]);
        prop_assert!((u - v).norm() <= 1e-12 * (1.0 + u.norm()));
    }

    #[test]
    fn wrap_to_b_lands_in_zone(alpha in prop::collection::vec(-5.0..5.0f64, 2)) {
        let w = wrap_to_b(&alpha);
        for (x, y) in alpha.iter().zip(&w) {
            prop_assert!(*y > -0.5 - 1e-12 && *y <= 0.5 + 1e-12);
            let d = x - y;
            prop_assert!((d - d.round()).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_round_trip(theta in 0.0..(2.0 * PI), alpha in real_alpha(2)) {
        let f = build_frame(&[theta.cos(), theta.sin()]).unwrap();
        let t = &f.tangents[0];
        prop_assert!((t[0] * f.n_hat[0] + t[1] * f.n_hat[1]).abs() < 1e-15);
        let (g, s) = f.decompose(&alpha);
        let back = f.compose(&g, s);
        prop_assert!((back[0] - alpha[0]).abs() < 1e-14 && (back[1] - alpha[1]).abs() < 1e-14);
    }

    #[test]
    fn sigma_profile_periodic_and_bounded(
        p in real_alpha(2), q in real_alpha(2), alpha in real_alpha(2),
        s2 in 0.01..0.1f64, s1 in 0.15..0.4f64, halo in 0.05..0.15f64,
    ) {
        let prof = SigmaProfile::new(2, s1, s2, halo, vec![[[p[0], p[1]], [q[0], q[1]]]]);
        let (s, _) = prof.eval(&alpha);
        prop_assert!(s >= s2 - 1e-15 && s <= s1 + 1e-15);
        for shift in [[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]] {
            let (t, _) = prof.eval(&[alpha[0] + shift[0], alpha[1] + shift[1]]);
            prop_assert!((s - t).abs() < 1e-12);
        }
        let (d, _) = prof.distance(&alpha);
        if d <= halo {
            prop_assert_eq!(s, s2);
        }
        if d >= 2.0 * halo {
            prop_assert_eq!(s, s1);
        }
        let (at_anchor, _) = prof.eval(&p);
        prop_assert_eq!(at_anchor, s2);
    }

    #[test]
    fn sigma_gradient_matches_differences(alpha in real_alpha(2), halo in 0.08..0.15f64) {
        let prof = SigmaProfile::new(2, 0.3, 0.05, halo, vec![[[0.1, -0.2], [0.1, 0.2]]]);
        let (d, _) = prof.distance(&alpha);
        prop_assume!(d > halo * 1.05 && d < halo * 1.95);
        let (_, g) = prof.eval(&alpha);
        let h = 1e-6;
        for k in 0..2 {
            let mut a = alpha.clone();
            let mut b = alpha.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (prof.eval(&a).0 - prof.eval(&b).0) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() < 1e-6, "k={} fd={} g={}", k, fd, g[k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn level_sets_are_accurate_and_partitioned(
        amp in 0.0..0.3f64, theta in 0.0..(2.0 * PI), frac in 0.1..0.3f64,
    ) {
        let m = MediumSpec::cosine_potential(2, amp);
        let model = CellModel::new(&m, 4).unwrap();
        let grid = sample_grid(&model, 24, 2, false).unwrap();
        let ((lo, _), (hi, _)) = grid.band_range(1);
        let lambda = lo + frac * (hi - lo);
        let n_hat = [theta.cos(), theta.sin()];
        let frame = build_frame(&n_hat).unwrap();
        let rep = check_regularity(&model, &grid, lambda, &frame).unwrap();
        prop_assume!(rep.regular);
        let level = rep.level_set.expect("level set");
        let mut total = 0;
        for seg in &level.segments {
            for p in &seg.points {
                total += 1;
                prop_assert!((p.mu - lambda).abs() <= 1e-10, "residual {}", p.mu - lambda);
                let gn = p.grad[0] * n_hat[0] + p.grad[1] * n_hat[1];
                let gnorm = (p.grad[0] * p.grad[0] + p.grad[1] * p.grad[1]).sqrt();
                prop_assert!((gn - p.grad_dot_n).abs() <= 1e-12 * gnorm);
                let ok = match p.tag {
                    Tag::Plus => gn > DEGENERATE_TOL * gnorm,
                    Tag::Minus => gn < -DEGENERATE_TOL * gnorm,
                    Tag::Degenerate => gn.abs() <= DEGENERATE_TOL * gnorm,
                };
                prop_assert!(ok, "tag {:?} with grad.n = {}", p.tag, gn);
            }
        }
        prop_assert!(total > 0);
    }
}

/// Damped free-space Green's function in one dimension with `k² = λ + iε`.
fn damped_green_1d(lambda: f64, eps: f64, r: f64) -> C64 {
    let k = c(lambda, eps).sqrt();
    C64::i() * (C64::i() * k * r).exp() / (2.0 * k)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn damped_solve_matches_direct_convolution(
        lambda in 0.3..4.0f64, eps in 0.2..1.0f64, x in 0.5..6.0f64,
    ) {
        // width 1/2 keeps the bump well inside the cell (edge value ~e^-20)
        let source = SourceSpec::gaussian(1, 0.5, 16);
        let got = damped_solve(&MediumSpec::free_space(1), &source, lambda, eps, &[vec![x]], 512, 24).unwrap()[0];
        let mut want = C64::new(0.0, 0.0);
        let cut = x.min(PI);
        for (a, b) in [(-PI, cut), (cut, PI)] {
            if b <= a {
                continue;
            }
            let (nodes, weights) = gauss_legendre_on(80, a, b);
            for (y, w) in nodes.iter().zip(&weights) {
                want += damped_green_1d(lambda, eps, (x - y).abs()) * source.eval(&[*y]).unwrap() * *w;
            }
        }
        prop_assert!((got - want).norm() <= 1e-10 * want.norm().max(1e-3), "got {} want {}", got, want);
    }
}
