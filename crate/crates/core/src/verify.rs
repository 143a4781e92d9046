//! Acceptance criteria A1–A10 with their pinned configurations and tolerances.
//!
//! Each check returns a [`CriterionReport`]; numerical failures inside a check
//! are reported as a failed criterion rather than propagated.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::bands::{band_at, check_regularity, sample_grid};
use crate::cell::{cdot, eigensolve, hf_gradient, CellModel, FieldEvaluator};
use crate::error::{LapError, Result};
use crate::fermi::{Tag, DEGENERATE_TOL};
use crate::lap::{damped_solve, lap_solve, propagating_sum, residue_line_check, FnBranch, LapConfig, LapContext};
use crate::lattice::{build_frame, dot, norm};
use crate::medium::{floquet_transform, AlphaGrid, CellSamples, MediumSpec, PreparedSource, SourceSpec};
use crate::special::{bessel_j0, convolve_reference, greens_free_1d, greens_free_2d, struve_bessel_integral, struve_h0, SupportBox};

/// Seed for the sampled criteria (A7, A9, A10).
pub const SEED: u64 = 20_240_601;

/// Identifiers and one-line titles of all criteria.
pub const CRITERIA: [(&str, &str); 10] = [
    ("A1", "1D free-space Green's function"),
    ("A2", "2D free-space Green's function"),
    ("A3", "2D smooth-source solve vs direct convolution"),
    ("A4", "propagating-term surface identity"),
    ("A5", "single-line residue identity"),
    ("A6", "contour independence"),
    ("A7", "Hellmann-Feynman gradients"),
    ("A8", "damped convergence"),
    ("A9", "Floquet-Bloch Parseval isometry"),
    ("A10", "property suites over the media matrix"),
];

/// Outcome of one criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: String,
    pub title: String,
    pub passed: bool,
    /// Worst observed value of the gated quantity.
    pub metric: f64,
    pub threshold: f64,
    pub seconds: f64,
    pub details: Vec<String>,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {} metric={:.3e} threshold={:.1e} ({:.1}s) {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.metric,
            self.threshold,
            self.seconds,
            self.title
        )
    }
}

struct Check {
    metric: f64,
    threshold: f64,
    passed: bool,
    details: Vec<String>,
}

impl Check {
    fn new(threshold: f64) -> Self {
        Self {
            metric: 0.0,
            threshold,
            passed: true,
            details: Vec::new(),
        }
    }

    /// Records a gated value against the main threshold.
    fn gate(&mut self, value: f64, note: String) {
        self.metric = self.metric.max(value);
        if !(value <= self.threshold) {
            self.passed = false;
        }
        self.details.push(note);
    }

    /// A secondary condition with its own threshold.
    fn require(&mut self, ok: bool, note: String) {
        if !ok {
            self.passed = false;
        }
        self.details.push(note);
    }

    fn note(&mut self, note: String) {
        self.details.push(note);
    }
}

/// Runs one criterion by identifier (`"A1"` … `"A10"`).
pub fn run_criterion(id: &str) -> Result<CriterionReport> {
    let (key, title) = CRITERIA
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(id))
        .ok_or_else(|| LapError::InvalidInput(format!("unknown criterion {id}")))?;
    let start = Instant::now();
    let outcome = match *key {
        "A1" => a1(),
        "A2" => a2(),
        "A3" => a3(),
        "A4" => a4(),
        "A5" => a5(),
        "A6" => a6(),
        "A7" => a7(),
        "A8" => a8(),
        "A9" => a9(),
        _ => a10(),
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(match outcome {
        Ok(c) => CriterionReport {
            id: key.to_string(),
            title: title.to_string(),
            passed: c.passed,
            metric: c.metric,
            threshold: c.threshold,
            seconds,
            details: c.details,
        },
        Err(e) => CriterionReport {
            id: key.to_string(),
            title: title.to_string(),
            passed: false,
            metric: f64::INFINITY,
            threshold: f64::NAN,
            seconds,
            details: vec![format!("error: {e}")],
        },
    })
}

/// Runs the listed criteria in order.
pub fn run_all(ids: &[&str]) -> Result<Vec<CriterionReport>> {
    ids.iter().map(|id| run_criterion(id)).collect()
}

fn a1() -> Result<Check> {
    let medium = MediumSpec::free_space(1);
    let frame = build_frame(&[1.0])?;
    let cfg = LapConfig {
        j_max: 32,
        sigma1: 3.0,
        sigma2: 3.0,
        nodes_per_slice: 512,
        abs_tol: 1e-12,
        rel_tol: 1e-11,
        ..Default::default()
    };
    let xs: Vec<Vec<f64>> = [4.0, 5.0, 8.0].iter().map(|x| vec![*x]).collect();
    let sol = lap_solve(&medium, &SourceSpec::delta(1), 0.09, &frame, &xs, &cfg)?;
    let mut c = Check::new(1e-6);
    for r in &sol.results {
        let exact = greens_free_1d(0.3, r.x[0])?;
        let err = (r.total - exact).norm();
        c.gate(err, format!("x={} |u-G|={err:.3e} |evanescent|={:.3e}", r.x[0], r.evanescent.norm()));
        c.require(r.evanescent.norm() <= 1e-8, "evanescent term <= 1e-8".into());
    }
    Ok(c)
}

fn a2() -> Result<Check> {
    let medium = MediumSpec::free_space(2);
    let cfg = LapConfig {
        j_max: 24,
        grid_n: 64,
        sigma1: 0.25,
        sigma2: 0.002,
        nodes_per_slice: 64,
        abs_tol: 1e-5,
        rel_tol: 1e-4,
        ..Default::default()
    };
    let mut c = Check::new(1e-2);
    for x in [[2.0, 0.0], [0.0, 3.0], [2.0, 2.0]] {
        let r = norm(&x);
        let frame = build_frame(&[x[0] / r, x[1] / r])?;
        let sol = lap_solve(&medium, &SourceSpec::delta(2), 0.09, &frame, &[x.to_vec()], &cfg)?;
        let res = &sol.results[0];
        let exact = greens_free_2d(0.3, r)?;
        let two = (res.evanescent + res.propagating - exact).norm() / exact.norm();
        let three = (res.total - exact).norm() / exact.norm();
        c.gate(
            two,
            format!(
                "x={x:?} rel err (evanescent+propagating)={two:.3e}, with third term={three:.3e}, |third term|={:.3e}",
                res.complex_ext.norm()
            ),
        );
    }
    Ok(c)
}

/// Gaussian bump of width 0.3 tabulated to `|m| <= 20`.
pub fn a3_source() -> SourceSpec {
    SourceSpec::gaussian(2, 0.3, 20)
}

fn a3() -> Result<Check> {
    let src = a3_source();
    let frame = build_frame(&[1.0, 0.0])?;
    let cfg = LapConfig {
        j_max: 20,
        grid_n: 64,
        abs_tol: 1e-6,
        rel_tol: 1e-5,
        nodes_per_slice: 64,
        ..Default::default()
    };
    let xs = vec![vec![2.0, 0.0], vec![3.0, 1.5], vec![2.5, -2.5]];
    let sol = lap_solve(&MediumSpec::free_space(2), &src, 0.09, &frame, &xs, &cfg)?;
    let support = SupportBox::centered(2, 1.8);
    let mut c = Check::new(1e-4);
    for r in &sol.results {
        let reference = convolve_reference(
            |d| greens_free_2d(0.3, norm(d)),
            |y| src.eval(y).unwrap_or_default(),
            &support,
            &r.x,
            1e-10,
        )?;
        let err = (r.total - reference.value).norm() / reference.value.norm();
        c.gate(err, format!("x={:?} |x|={:.3} rel err={err:.3e}", r.x, norm(&r.x)));
    }
    Ok(c)
}

fn a4() -> Result<Check> {
    let medium = MediumSpec::free_space(2);
    let model = CellModel::new(&medium, 8)?;
    let grid = sample_grid(&model, 64, 2, false)?;
    let frame = build_frame(&[1.0, 0.0])?;
    let rep = check_regularity(&model, &grid, 0.09, &frame)?;
    let level = rep
        .level_set
        .ok_or_else(|| LapError::Domain("empty level set at lambda = 0.09".into()))?;
    let prep = PreparedSource::new(&SourceSpec::delta(2), 8);
    let xs = vec![vec![2.0, 0.0]];
    let ev = FieldEvaluator::new(2, 8, &xs);
    let ctx = LapContext {
        model: &model,
        source: &prep,
        evaluator: &ev,
        lambda: 0.09,
    };
    let sum = propagating_sum(&ctx, &level, 0.0)?[0];
    // (1/8π)(J0 + i H0) = (1/4π²) ∫_0^{π/2} e^{iz cos θ} dθ
    let by_quadrature = struve_bessel_integral(0.6) / (4.0 * PI * PI);
    let by_series = C64::new(bessel_j0(0.6).value, struve_h0(0.6).value) / (8.0 * PI);
    let mut c = Check::new(1e-4);
    let err = (sum - by_quadrature).norm();
    c.gate(err, format!("surface sum {sum:.10} vs {by_quadrature:.10}: diff {err:.3e}"));
    c.require(
        (by_quadrature - by_series).norm() < 1e-12,
        format!("quadrature and series references differ by {:.3e}", (by_quadrature - by_series).norm()),
    );
    Ok(c)
}

fn a5() -> Result<Check> {
    let br = FnBranch {
        mu: |s: C64| s * s,
        dmu: |s: C64| 2.0 * s,
    };
    let one = |_: C64| C64::new(1.0, 0.0);
    let r = residue_line_check(&br, &one, 0.09, 1e-3, 0.1, (-0.5, 0.5))?;
    let mut c = Check::new(1e-10);
    c.gate(r.diff, format!("lhs={:.12} rhs={:.12} poles={:?}", r.lhs, r.rhs, r.poles));
    let z = C64::new(0.09, 1e-3).sqrt();
    c.require(
        r.poles.len() == 1 && (r.poles[0] - z).norm() < 1e-10 && !r.inconclusive,
        "exactly one captured pole at sqrt(0.09+0.001i)".into(),
    );
    Ok(c)
}

fn a6() -> Result<Check> {
    let mut c = Check::new(2e-6);
    let frame1 = build_frame(&[1.0])?;
    let base1 = LapConfig {
        j_max: 128,
        halo: 0.1,
        abs_tol: 1e-11,
        rel_tol: 1e-10,
        ..Default::default()
    };
    let mut totals = Vec::new();
    for (s1, s2) in [(0.03, 0.03), (0.05, 0.08)] {
        let cfg = LapConfig {
            sigma1: s1,
            sigma2: s2,
            ..base1.clone()
        };
        let sol = lap_solve(&MediumSpec::free_space(1), &SourceSpec::delta(1), 0.09, &frame1, &[vec![5.0]], &cfg)?;
        totals.push(sol.results[0].total);
    }
    let d = (totals[0] - totals[1]).norm();
    c.gate(d, format!("1D x=5: {:.12} vs {:.12}, diff {d:.3e}", totals[0], totals[1]));

    let frame2 = build_frame(&[1.0, 0.0])?;
    let base2 = LapConfig {
        j_max: 20,
        grid_n: 64,
        abs_tol: 1e-7,
        rel_tol: 1e-6,
        nodes_per_slice: 64,
        ..Default::default()
    };
    let mut totals = Vec::new();
    for (s1, s2) in [(0.25, 0.05), (0.3, 0.03)] {
        let cfg = LapConfig {
            sigma1: s1,
            sigma2: s2,
            ..base2.clone()
        };
        let sol = lap_solve(&MediumSpec::free_space(2), &a3_source(), 0.09, &frame2, &[vec![2.0, 0.0]], &cfg)?;
        totals.push(sol.results[0].total);
    }
    let d = (totals[0] - totals[1]).norm();
    c.gate(d, format!("2D x=(2,0): {:.12} vs {:.12}, diff {d:.3e}", totals[0], totals[1]));
    Ok(c)
}

fn a7() -> Result<Check> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut c = Check::new(1e-6);
    for (dim, amp, j_max) in [(1usize, 1.0, 16usize), (2, 0.25, 6)] {
        let model = CellModel::new(&MediumSpec::cosine_potential(dim, amp), j_max)?;
        let mut worst = 0.0f64;
        let mut count = 0;
        while count < 20 {
            let alpha: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let band = rng.random_range(1..=3usize);
            let ac: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
            let bands = eigensolve(&model.assemble(&ac), band + 1)?;
            let b = &bands[band - 1];
            let gap = bands
                .iter()
                .filter(|o| o.band_index != band)
                .map(|o| (o.mu - b.mu).abs())
                .fold(f64::INFINITY, f64::min);
            if gap < 1e-3 {
                continue;
            }
            let hf = hf_gradient(&model, &alpha, b)?;
            let fd = central_gradient(&model, &alpha, band)?;
            let diff: Vec<f64> = hf.iter().zip(&fd).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&diff) / norm(&hf));
            count += 1;
        }
        c.gate(worst, format!("dim={dim}: worst relative error {worst:.3e} over 20 points"));
    }
    Ok(c)
}

/// Richardson-extrapolated central differences of `μ_band`.
fn central_gradient(model: &CellModel, alpha: &[f64], band: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(alpha.len());
    for k in 0..alpha.len() {
        let diff = |h: f64| -> Result<f64> {
            let mut p = alpha.to_vec();
            let mut m = alpha.to_vec();
            p[k] += h;
            m[k] -= h;
            Ok((band_at(model, &p, band)?.mu - band_at(model, &m, band)?.mu) / (2.0 * h))
        };
        let (d1, d2) = (diff(2e-4)?, diff(1e-4)?);
        out.push((4.0 * d2 - d1) / 3.0);
    }
    Ok(out)
}

fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn a8() -> Result<Check> {
    let ladder = [0.2, 0.1, 0.05, 0.025];
    let mut c = Check::new(0.0);
    c.threshold = f64::NAN;
    let cases: [(usize, f64, Vec<Vec<f64>>, f64, usize, usize); 2] = [
        (1, 5.29, vec![vec![0.5], vec![1.0]], 5e-3, 32, 4096),
        (2, 0.09, vec![vec![2.0, 0.0], vec![2.5, 1.0]], 5e-2, 8, 64),
    ];
    let mut worst_ratio = 0.0f64;
    for (dim, lambda, xs, tol, j_max, n_alpha) in cases {
        let medium = MediumSpec::free_space(dim);
        let src = SourceSpec::delta(dim);
        let n_hat: Vec<f64> = (0..dim).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
        let frame = build_frame(&n_hat)?;
        let cfg = LapConfig {
            j_max,
            abs_tol: 1e-8,
            rel_tol: 1e-7,
            ..Default::default()
        };
        let lap = lap_solve(&medium, &src, lambda, &frame, &xs, &cfg)?;
        let u: Vec<C64> = lap.results.iter().map(|r| r.total).collect();
        let mut errs = Vec::new();
        for eps in ladder {
            let ue = damped_solve(&medium, &src, lambda, eps, &xs, n_alpha, j_max)?;
            errs.push(max_abs_diff(&ue, &u));
        }
        let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
        let last = *errs.last().expect("nonempty ladder");
        worst_ratio = worst_ratio.max(last / tol);
        let listed: Vec<String> = errs.iter().map(|e| format!("{e:.3e}")).collect();
        c.require(
            decreasing,
            format!("dim={dim} lambda={lambda}: errors [{}] strictly decreasing: {decreasing}", listed.join(", ")),
        );
        c.require(last <= tol, format!("dim={dim}: final error {last:.3e} <= {tol:.0e}"));
    }
    c.metric = worst_ratio;
    c.threshold = 1.0;
    c.note("metric is the final error divided by its bound".into());
    Ok(c)
}

fn a9() -> Result<Check> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut c = Check::new(1e-10);
    for (dim, n) in [(1usize, 8usize), (2, 6)] {
        for trial in 0..5 {
            let mut samples = CellSamples::new(dim, 4);
            let reach = (n / 2) as i32;
            let cells: Vec<Vec<i32>> = if dim == 1 {
                (-reach + 1..reach).map(|m| vec![m]).collect()
            } else {
                (-reach + 1..reach)
                    .flat_map(|a| (-reach + 1..reach).map(move |b| vec![a, b]))
                    .collect()
            };
            for cell in cells {
                if rng.random_bool(0.3) {
                    continue;
                }
                let vals = (0..samples.nodes_per_cell())
                    .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
                samples.insert(cell, vals)?;
            }
            let field = floquet_transform(&samples, &AlphaGrid::uniform(dim, n))?;
            let (lhs, rhs) = (samples.norm_sq(), field.mean_norm_sq());
            let rel = (lhs - rhs).abs() / lhs.max(f64::MIN_POSITIVE);
            c.gate(rel, format!("dim={dim} trial={trial}: |f|^2={lhs:.6} mean|Jf|^2={rhs:.6} rel {rel:.2e}"));
        }
    }
    Ok(c)
}

struct MediumCase {
    name: &'static str,
    medium: MediumSpec,
    j_max: usize,
}

fn media_matrix() -> Vec<MediumCase> {
    vec![
        MediumCase {
            name: "free space 1D",
            medium: MediumSpec::free_space(1),
            j_max: 16,
        },
        MediumCase {
            name: "free space 2D",
            medium: MediumSpec::free_space(2),
            j_max: 6,
        },
        MediumCase {
            name: "cosine 1D",
            medium: MediumSpec::cosine_potential(1, 1.0),
            j_max: 16,
        },
        MediumCase {
            name: "cosine 2D",
            medium: MediumSpec::cosine_potential(2, 0.25),
            j_max: 6,
        },
        MediumCase {
            name: "anisotropic diag(1,2)",
            medium: MediumSpec::constant(2, &[1.0, 0.0, 0.0, 2.0], 0.0),
            j_max: 6,
        },
    ]
}

fn a10() -> Result<Check> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut c = Check::new(1e-10);
    for case in media_matrix() {
        let dim = case.medium.dim;
        let model = CellModel::new(&case.medium, case.j_max)?;
        let mut herm = 0.0f64;
        let mut resid = 0.0f64;
        let mut sym = 0.0f64;
        let mut gauge = 0.0f64;
        let prep = PreparedSource::new(&SourceSpec::gaussian(dim, 0.7, 4), case.j_max);
        let ev = FieldEvaluator::new(dim, case.j_max, &[vec![0.7; dim]]);
        for _ in 0..10 {
            let alpha: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let ac: Vec<C64> = alpha.iter().map(|v| C64::new(*v, 0.0)).collect();
            let h = model.assemble(&ac);
            let scale = h.norm();
            herm = herm.max(h.hermiticity_defect() / scale);
            let bands = eigensolve(&h, 4)?;
            for b in &bands {
                let hv = h.matvec(&b.coeffs);
                let r: f64 = hv
                    .iter()
                    .zip(&b.coeffs)
                    .map(|(x, v)| (x - v * b.mu).norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                resid = resid.max(r / scale);
            }
            let neg: Vec<C64> = ac.iter().map(|z| -z).collect();
            let mirrored = eigensolve(&model.assemble(&neg), 4)?;
            for (a, b) in bands.iter().zip(&mirrored) {
                sym = sym.max((a.mu - b.mu).abs() / (1.0 + a.mu.abs()));
            }
            let g = prep.vector(&ac);
            let b = &bands[0];
            let value = |coeffs: &[C64]| cdot(coeffs, &g) * ev.eval(&ac, coeffs)[0];
            let turned: Vec<C64> = b.coeffs.iter().map(|z| z * C64::from_polar(1.0, 1.234)).collect();
            gauge = gauge.max((value(&b.coeffs) - value(&turned)).norm());
        }
        c.gate(herm, format!("{}: hermiticity defect {herm:.2e}", case.name));
        c.gate(resid, format!("{}: eigen residual {resid:.2e}", case.name));
        c.gate(sym, format!("{}: band symmetry {sym:.2e}", case.name));
        c.gate(gauge, format!("{}: gauge defect {gauge:.2e}", case.name));

        let grid = sample_grid(&model, 32, 2, false)?;
        let ((lo, _), (hi, _)) = grid.band_range(1);
        // low in the first band, so the level set stays clear of band crossings
        let lambda = lo + 0.2 * (hi - lo);
        let n_hat: Vec<f64> = if dim == 1 { vec![1.0] } else { vec![0.6, 0.8] };
        let frame = build_frame(&n_hat)?;
        let rep = check_regularity(&model, &grid, lambda, &frame)?;
        c.require(
            rep.regular,
            format!("{}: lambda={lambda:.4} regular: {} {:?}", case.name, rep.regular, rep.reasons),
        );
        let Some(level) = rep.level_set else {
            c.require(false, format!("{}: no level set at lambda={lambda}", case.name));
            continue;
        };
        let mut lvl = 0.0f64;
        let mut partition = true;
        let mut gs = 0.0f64;
        let mut total = 0;
        let mut tagged = [0usize; 3];
        for seg in &level.segments {
            for p in &seg.points {
                total += 1;
                lvl = lvl.max((p.mu - lambda).abs());
                let gnorm = norm(&p.grad);
                let gn = dot(&p.grad, &n_hat);
                let consistent = match p.tag {
                    Tag::Plus => gn > DEGENERATE_TOL * gnorm,
                    Tag::Minus => gn < -DEGENERATE_TOL * gnorm,
                    Tag::Degenerate => gn.abs() <= DEGENERATE_TOL * gnorm,
                };
                partition &= consistent;
                tagged[p.tag as usize] += 1;
                if p.tag == Tag::Plus {
                    // G_s = |∂_s μ| sqrt(1 + s'(γ)²) with s' = -∂_γ μ / ∂_s μ
                    let tangential = (gnorm * gnorm - gn * gn).max(0.0).sqrt();
                    let g_s = gn.abs() * (1.0 + (tangential / gn).powi(2)).sqrt();
                    gs = gs.max((g_s - gnorm).abs() / gnorm);
                }
            }
        }
        partition &= tagged.iter().sum::<usize>() == total && total > 0;
        c.gate(lvl, format!("{}: level-set residual {lvl:.2e} at lambda={lambda:.4}", case.name));
        c.gate(gs, format!("{}: G_s vs |grad mu| {gs:.2e}", case.name));
        c.require(
            partition,
            format!("{}: {total} points tagged plus/minus/degenerate = {tagged:?}", case.name),
        );
    }
    Ok(c)
}
