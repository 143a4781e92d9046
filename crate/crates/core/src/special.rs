//! Bessel `J0`, `J1`, `Y0`, `Y1`, Struve `H0` and the Hankel function
//! `H0^(1)`, plus free-space Green's functions and a direct convolution
//! reference used to validate solver output.
//!
//! Power series are summed in double-double arithmetic up to `SERIES_MAX`,
//! which keeps the alternating sums accurate well past the point where plain
//! `f64` series lose all digits. Asymptotic expansions take over beyond.

use num_complex::Complex64 as C64;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{LapError, Result};
use crate::quadrature::gauss_legendre_on;

/// Upper end of the power-series range.
pub const SERIES_MAX: f64 = 25.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const EULER_GAMMA_LO: f64 = -4.942_915_152_430_645e-18;

/// A value together with an estimate of its truncation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecialFnResult<T> {
    pub value: T,
    pub est_error: f64,
}

#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn quick(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd {
            hi: s,
            lo: b - (s - a),
        }
    }

    fn add(self, o: Dd) -> Dd {
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let e = (self.hi - (s - bb)) + (o.hi - bb) + self.lo + o.lo;
        Dd::quick(s, e)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + self.hi * o.lo + self.lo * o.hi;
        Dd::quick(p, e)
    }

    fn mul_f(self, b: f64) -> Dd {
        self.mul(Dd::from(b))
    }

    fn div_f(self, b: f64) -> Dd {
        let q1 = self.hi / b;
        let r = self.add(Dd::from(b).mul_f(q1).neg());
        let q2 = r.hi / b;
        Dd::quick(q1, q2)
    }

    fn square(x: f64) -> Dd {
        let p = x * x;
        Dd {
            hi: p,
            lo: x.mul_add(x, -p),
        }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Series for `J0`, `J1` and the logarithm-free parts of `Y0`, `Y1`.
struct BesselSeries {
    j0: f64,
    j1: f64,
    /// `Σ_{k≥1} (-1)^{k+1} H_k (x²/4)^k / (k!)²`
    y0_tail: f64,
    /// `Σ_{k≥0} (-1)^k [ψ(k+1)+ψ(k+2)] (x/2)^{2k+1} / (k!(k+1)!)`
    y1_tail: f64,
    err: f64,
}

fn bessel_series(x: f64) -> BesselSeries {
    let q = Dd::square(x).div_f(4.0);
    let half = x / 2.0;
    let mut t0 = Dd::from(1.0); // (x²/4)^k / (k!)²
    let mut t1 = Dd::from(half); // (x/2)^{2k+1} / (k!(k+1)!)
    let mut j0 = t0;
    let mut j1 = t1;
    let mut y0 = Dd::ZERO;
    let gamma2 = Dd {
        hi: 2.0 * EULER_GAMMA,
        lo: 2.0 * EULER_GAMMA_LO,
    };
    let mut y1 = t1.mul(Dd::from(1.0).add(gamma2.neg()));
    let mut harmonic = Dd::ZERO; // H_k
    let mut max_term: f64 = 1.0f64.max(half.abs());
    let mut last = 0.0;
    for k in 1..400 {
        let kf = k as f64;
        t0 = t0.mul(q).div_f(kf * kf).neg();
        t1 = t1.mul(q).div_f(kf * (kf + 1.0)).neg();
        harmonic = harmonic.add(Dd::from(1.0).div_f(kf));
        j0 = j0.add(t0);
        j1 = j1.add(t1);
        y0 = y0.add(t0.neg().mul(harmonic));
        // ψ(k+1)+ψ(k+2) = -2γ + 2H_k + 1/(k+1)
        let psi = gamma2
            .neg()
            .add(harmonic.mul_f(2.0))
            .add(Dd::from(1.0).div_f(kf + 1.0));
        y1 = y1.add(t1.mul(psi));
        let mag = t0.hi.abs().max(t1.hi.abs()) * (1.0 + harmonic.hi);
        max_term = max_term.max(mag);
        last = mag;
        if mag < 1e-34 * max_term && kf > q.hi {
            break;
        }
    }
    BesselSeries {
        j0: j0.value(),
        j1: j1.value(),
        y0_tail: y0.value(),
        y1_tail: y1.value(),
        err: last + 1e-30 * max_term + 1e-16,
    }
}

fn struve_series(x: f64) -> (f64, f64) {
    let q = Dd::square(x).div_f(4.0);
    // (x/2)^{2k+1} / Γ(k+3/2)^2, Γ(3/2)^2 = π/4
    let mut t = Dd::from(x).mul_f(2.0).div_f(PI);
    let mut sum = t;
    let mut max_term = t.hi.abs();
    let mut last = 0.0;
    for k in 0..400 {
        let a = k as f64 + 1.5;
        t = t.mul(q).div_f(a * a).neg();
        sum = sum.add(t);
        max_term = max_term.max(t.hi.abs());
        last = t.hi.abs();
        if last < 1e-34 * max_term && a > q.hi {
            break;
        }
    }
    (sum.value(), last + 1e-30 * max_term + 1e-16)
}

/// Hankel-type asymptotic `(P, Q)` for order `nu`, with the size of the first
/// omitted term.
fn hankel_pq(nu: f64, x: f64) -> (f64, f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut a = 1.0;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut prev = f64::INFINITY;
    let mut err = 0.0;
    for k in 1..60 {
        let kf = k as f64;
        a *= (mu - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf);
        let term = a / x.powi(k);
        if term.abs() >= prev {
            err = term.abs();
            break;
        }
        prev = term.abs();
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        err = term.abs();
        if term.abs() < 1e-18 {
            break;
        }
    }
    (p, q, err)
}

fn bessel_asymptotic(nu: f64, x: f64) -> (f64, f64, f64) {
    let (p, q, err) = hankel_pq(nu, x);
    let chi = x - (0.5 * nu + 0.25) * PI;
    let amp = (2.0 / (PI * x)).sqrt();
    let (s, c) = chi.sin_cos();
    (
        amp * (p * c - q * s),
        amp * (p * s + q * c),
        amp * (err + 4.0 * f64::EPSILON * (1.0 + x.abs() * f64::EPSILON)),
    )
}

/// `H0(x) - Y0(x)` asymptotic series.
fn struve_minus_y0_asymptotic(x: f64) -> (f64, f64) {
    let mut term = 2.0 / (PI * x);
    let mut sum = term;
    let mut err = term.abs();
    for k in 0..60 {
        let r = (2.0 * k as f64 + 1.0).powi(2) / (x * x);
        let next = -term * r;
        if next.abs() >= term.abs() {
            err = next.abs();
            break;
        }
        term = next;
        sum += term;
        err = term.abs();
        if err < 1e-18 {
            break;
        }
    }
    (sum, err)
}

fn domain_check(name: &str, r: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(LapError::Domain(format!("{name} requires r > 0, got {r}")));
    }
    Ok(())
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(r: f64) -> SpecialFnResult<f64> {
    let x = r.abs();
    if x <= SERIES_MAX {
        let s = bessel_series(x);
        SpecialFnResult {
            value: s.j0,
            est_error: s.err,
        }
    } else {
        let (j, _, e) = bessel_asymptotic(0.0, x);
        SpecialFnResult {
            value: j,
            est_error: e,
        }
    }
}

/// Bessel function of the first kind, order one.
pub fn bessel_j1(r: f64) -> SpecialFnResult<f64> {
    let x = r.abs();
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    if x <= SERIES_MAX {
        let s = bessel_series(x);
        SpecialFnResult {
            value: sign * s.j1,
            est_error: s.err,
        }
    } else {
        let (j, _, e) = bessel_asymptotic(1.0, x);
        SpecialFnResult {
            value: sign * j,
            est_error: e,
        }
    }
}

/// Bessel function of the second kind, order zero.
pub fn bessel_y0(r: f64) -> Result<SpecialFnResult<f64>> {
    domain_check("bessel_y0", r)?;
    if r <= SERIES_MAX {
        let s = bessel_series(r);
        let lg = (0.5 * r).ln() + EULER_GAMMA;
        let value = 2.0 / PI * (lg * s.j0 + s.y0_tail);
        Ok(SpecialFnResult {
            value,
            est_error: s.err * (1.0 + lg.abs()),
        })
    } else {
        let (_, y, e) = bessel_asymptotic(0.0, r);
        Ok(SpecialFnResult {
            value: y,
            est_error: e,
        })
    }
}

/// Bessel function of the second kind, order one.
pub fn bessel_y1(r: f64) -> Result<SpecialFnResult<f64>> {
    domain_check("bessel_y1", r)?;
    if r <= SERIES_MAX {
        let s = bessel_series(r);
        let value = 2.0 / PI * s.j1 * (0.5 * r).ln() - 2.0 / (PI * r) - s.y1_tail / PI;
        Ok(SpecialFnResult {
            value,
            est_error: s.err * (1.0 + (0.5 * r).ln().abs()),
        })
    } else {
        let (_, y, e) = bessel_asymptotic(1.0, r);
        Ok(SpecialFnResult {
            value: y,
            est_error: e,
        })
    }
}

/// Struve function `H0`. Odd in `r`.
pub fn struve_h0(r: f64) -> SpecialFnResult<f64> {
    let x = r.abs();
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    if x <= SERIES_MAX {
        let (v, e) = struve_series(x);
        SpecialFnResult {
            value: sign * v,
            est_error: e,
        }
    } else {
        let (_, y, ey) = bessel_asymptotic(0.0, x);
        let (d, ed) = struve_minus_y0_asymptotic(x);
        SpecialFnResult {
            value: sign * (y + d),
            est_error: ey + ed,
        }
    }
}

/// Hankel function of the first kind, `J0 + i Y0`.
pub fn hankel1_0(r: f64) -> Result<SpecialFnResult<C64>> {
    let y = bessel_y0(r)?;
    let j = bessel_j0(r);
    Ok(SpecialFnResult {
        value: C64::new(j.value, y.value),
        est_error: j.est_error + y.est_error,
    })
}

/// Outgoing free-space Green's function of `-Δ - k²` in the plane: `(i/4) H0^(1)(k r)`.
pub fn greens_free_2d(k: f64, r: f64) -> Result<C64> {
    if !(k > 0.0) {
        return Err(LapError::Domain(format!("wavenumber must be positive, got {k}")));
    }
    let h = hankel1_0(k * r)?;
    Ok(C64::new(0.0, 0.25) * h.value)
}

/// Outgoing solution of `-u'' - k² u = δ` on the line: `i e^{ik|x|} / (2k)`.
pub fn greens_free_1d(k: f64, x: f64) -> Result<C64> {
    if !(k > 0.0) {
        return Err(LapError::Domain(format!("wavenumber must be positive, got {k}")));
    }
    Ok(C64::new(0.0, 1.0) * C64::from_polar(1.0, k * x.abs()) / (2.0 * k))
}

/// Axis-aligned box containing the support of a source.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SupportBox {
    pub fn centered(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

/// Result of [`convolve_reference`].
#[derive(Debug, Clone, Copy)]
pub struct Convolution {
    pub value: C64,
    pub change: f64,
    pub order: usize,
}

/// `u(x) = ∫ G(x - y) f(y) dy` over the support box by tensor Gauss–Legendre,
/// doubling the order until successive values differ by at most `tol`.
///
/// Refuses evaluation points inside the support box, where the kernel is singular.
pub fn convolve_reference<K, S>(
    kernel: K,
    source: S,
    support: &SupportBox,
    x: &[f64],
    tol: f64,
) -> Result<Convolution>
where
    K: Fn(&[f64]) -> Result<C64>,
    S: Fn(&[f64]) -> C64,
{
    let dim = support.lo.len();
    if x.len() != dim || support.hi.len() != dim {
        return Err(LapError::InvalidInput("dimension mismatch in convolution".into()));
    }
    if support.contains(x) {
        return Err(LapError::Domain(format!(
            "evaluation point {x:?} lies inside the source support"
        )));
    }
    let eval = |n: usize| -> Result<C64> {
        let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..dim)
            .map(|k| gauss_legendre_on(n, support.lo[k], support.hi[k]))
            .collect();
        let mut acc = C64::new(0.0, 0.0);
        let mut y = vec![0.0; dim];
        let mut d = vec![0.0; dim];
        let total = n.pow(dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for k in 0..dim {
                let i = rem % n;
                rem /= n;
                y[k] = rules[k].0[i];
                w *= rules[k].1[i];
                d[k] = x[k] - y[k];
            }
            let fy = source(&y);
            if fy != C64::new(0.0, 0.0) {
                acc += kernel(&d)? * fy * w;
            }
        }
        Ok(acc)
    };
    let mut n = 16;
    let mut prev = eval(n)?;
    let max_order = if dim == 1 { 4096 } else { 512 };
    loop {
        n *= 2;
        let cur = eval(n)?;
        let change = (cur - prev).norm();
        if change <= tol {
            return Ok(Convolution {
                value: cur,
                change,
                order: n,
            });
        }
        if n >= max_order {
            return Err(LapError::Quadrature(format!(
                "convolution did not reach tolerance {tol:.1e} (last change {change:.3e})"
            )));
        }
        prev = cur;
    }
}

/// `∫_0^{π/2} e^{i z cos θ} dθ`, evaluated by composite Gauss–Legendre.
/// Used as an independent route to `(π/2)(J0 + i H0)`.
pub fn struve_bessel_integral(z: f64) -> C64 {
    let panels = 8 + (z.abs() as usize);
    let mut acc = C64::new(0.0, 0.0);
    for p in 0..panels {
        let a = FRAC_PI_2 * p as f64 / panels as f64;
        let b = FRAC_PI_2 * (p + 1) as f64 / panels as f64;
        let (x, w) = gauss_legendre_on(20, a, b);
        for (t, wt) in x.iter().zip(&w) {
            acc += C64::from_polar(*wt, z * t.cos());
        }
    }
    acc
}
