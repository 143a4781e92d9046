//! Quadrature kernels: Gauss–Legendre rules and a globally adaptive
//! Gauss–Kronrod (7/15) integrator for vector-valued complex integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use num_complex::Complex64 as C64;

use crate::error::{LapError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Legendre order must be positive");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d.is_finite() {
            dp = d;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    (
        x.iter().map(|t| c + h * t).collect(),
        w.iter().map(|v| v * h).collect(),
    )
}

/// Tolerances and budget for [`integrate_adaptive`].
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_evals: usize,
    /// Smallest panel width; panels below it are accepted as they are.
    pub min_width: f64,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_evals: 2_000_000,
            min_width: 1e-14,
        }
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone)]
pub struct Integral {
    pub value: Vec<C64>,
    pub error: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<C64>,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F>(f: &mut F, a: f64, b: f64, width: usize) -> Result<(Vec<C64>, f64)>
where
    F: FnMut(f64) -> Result<Vec<C64>>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![C64::new(0.0, 0.0); width];
    let mut gauss = vec![C64::new(0.0, 0.0); width];
    let fc = f(c)?;
    check_width(&fc, width)?;
    for k in 0..width {
        kron[k] += fc[k] * WGK[7];
        gauss[k] += fc[k] * WG[3];
    }
    for (i, &x) in XGK.iter().enumerate().take(7) {
        let f1 = f(c - h * x)?;
        let f2 = f(c + h * x)?;
        check_width(&f1, width)?;
        check_width(&f2, width)?;
        for k in 0..width {
            let s = f1[k] + f2[k];
            kron[k] += s * WGK[i];
            if i % 2 == 1 {
                gauss[k] += s * WG[i / 2];
            }
        }
    }
    let mut err: f64 = 0.0;
    for k in 0..width {
        kron[k] *= h;
        gauss[k] *= h;
        err = err.max((kron[k] - gauss[k]).norm());
    }
    Ok((kron, err))
}

fn check_width(v: &[C64], width: usize) -> Result<()> {
    if v.len() != width {
        return Err(LapError::Quadrature(format!(
            "integrand returned {} components, expected {width}",
            v.len()
        )));
    }
    if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(LapError::Quadrature("non-finite integrand value".into()));
    }
    Ok(())
}

/// Globally adaptive G7K15 integration of a vector-valued integrand.
///
/// `breaks` is a sorted list of points in `[a, b]` (endpoints included or not)
/// where the integrand may be non-smooth; `initial_panels` further subdivides
/// every piece uniformly. The error norm is the maximum over components.
pub fn integrate_adaptive<F>(
    mut f: F,
    breaks: &[f64],
    initial_panels: usize,
    width: usize,
    opts: &AdaptiveOptions,
) -> Result<Integral>
where
    F: FnMut(f64) -> Result<Vec<C64>>,
{
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|v| v.is_finite()).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * (1.0 + y.abs()));
    if pts.len() < 2 {
        return Ok(Integral {
            value: vec![C64::new(0.0, 0.0); width],
            error: 0.0,
            evals: 0,
            converged: true,
        });
    }
    let panels_per_piece = initial_panels.max(1);
    let mut heap = BinaryHeap::new();
    let mut total = vec![C64::new(0.0, 0.0); width];
    let mut total_err = 0.0;
    let mut evals = 0;
    for pair in pts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in 0..panels_per_piece {
            let pa = a + (b - a) * i as f64 / panels_per_piece as f64;
            let pb = a + (b - a) * (i + 1) as f64 / panels_per_piece as f64;
            let (v, e) = gk15(&mut f, pa, pb, width)?;
            evals += 15;
            for k in 0..width {
                total[k] += v[k];
            }
            total_err += e;
            heap.push(Panel {
                a: pa,
                b: pb,
                value: v,
                error: e,
            });
        }
    }
    let mut accepted_err = 0.0;
    loop {
        let scale = total.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let target = opts.abs_tol.max(opts.rel_tol * scale);
        if total_err + accepted_err <= target {
            break;
        }
        if evals + 30 > opts.max_evals {
            return Ok(Integral {
                value: total,
                error: total_err + accepted_err,
                evals,
                converged: false,
            });
        }
        let Some(p) = heap.pop() else { break };
        if p.b - p.a <= opts.min_width {
            accepted_err += p.error;
            total_err -= p.error;
            continue;
        }
        let m = 0.5 * (p.a + p.b);
        let (v1, e1) = gk15(&mut f, p.a, m, width)?;
        let (v2, e2) = gk15(&mut f, m, p.b, width)?;
        evals += 30;
        for k in 0..width {
            total[k] += v1[k] + v2[k] - p.value[k];
        }
        total_err += e1 + e2 - p.error;
        heap.push(Panel {
            a: p.a,
            b: m,
            value: v1,
            error: e1,
        });
        heap.push(Panel {
            a: m,
            b: p.b,
            value: v2,
            error: e2,
        });
    }
    // re-sum to shed the drift of the running updates
    let mut value = vec![C64::new(0.0, 0.0); width];
    let mut err = accepted_err;
    for p in heap.iter() {
        for k in 0..width {
            value[k] += p.value[k];
        }
        err += p.error;
    }
    Ok(Integral {
        value,
        error: err,
        evals,
        converged: true,
    })
}

/// Scalar convenience wrapper around [`integrate_adaptive`].
pub fn integrate_scalar<F>(mut f: F, a: f64, b: f64, opts: &AdaptiveOptions) -> Result<(C64, f64)>
where
    F: FnMut(f64) -> C64,
{
    let r = integrate_adaptive(|t| Ok(vec![f(t)]), &[a, b], 1, 1, opts)?;
    if !r.converged {
        return Err(LapError::Quadrature(format!(
            "adaptive quadrature on [{a}, {b}] stopped at error {:.3e}",
            r.error
        )));
    }
    Ok((r.value[0], r.error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1usize, 2, 5, 16, 64, 200] {
            let (x, w) = gauss_legendre(n);
            let total: f64 = w.iter().sum();
            assert!((total - 2.0).abs() < 1e-13, "n={n}");
            // x^(2n-2) is integrated exactly
            let p = 2 * n - 2;
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
            assert!((q - 2.0 / (p as f64 + 1.0)).abs() < 1e-12, "n={n}");
            assert!(x.windows(2).all(|v| v[0] < v[1]));
        }
    }

    #[test]
    fn gauss_legendre_mapped() {
        let (x, w) = gauss_legendre_on(12, 0.0, std::f64::consts::PI);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.sin()).sum();
        assert!((s - 2.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_peak() {
        let eps = 1e-3;
        let opts = AdaptiveOptions {
            abs_tol: 1e-14,
            rel_tol: 1e-13,
            ..Default::default()
        };
        let (v, _) = integrate_scalar(|s| C64::new(1.0, 0.0) / C64::new(s * s - 0.09, -eps), -0.5, 0.5, &opts)
            .unwrap();
        // closed form: (1/(2z)) ln((s - z)/(s + z)) with z^2 = 0.09 + i eps
        let z = C64::new(0.09, eps).sqrt();
        let anti = |s: f64| ((C64::new(s, 0.0) - z).ln() - (C64::new(s, 0.0) + z).ln()) / (2.0 * z);
        let exact = anti(0.5) - anti(-0.5);
        // s - z and s + z stay in fixed half-planes, so each log is continuous
        assert!((v - exact).norm() < 1e-10 * exact.norm().max(1.0), "{v} vs {exact}");
    }

    #[test]
    fn adaptive_vector_and_breaks() {
        let opts = AdaptiveOptions::default();
        let r = integrate_adaptive(
            |t| Ok(vec![C64::new(t.abs(), 0.0), C64::new(0.0, t * t)]),
            &[-1.0, 0.0, 1.0],
            2,
            2,
            &opts,
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.value[0].re - 1.0).abs() < 1e-14);
        assert!((r.value[1].im - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_rejects_non_finite() {
        let r = integrate_adaptive(
            |_| Ok(vec![C64::new(f64::NAN, 0.0)]),
            &[0.0, 1.0],
            1,
            1,
            &AdaptiveOptions::default(),
        );
        assert!(matches!(r, Err(LapError::Quadrature(_))));
    }
}
