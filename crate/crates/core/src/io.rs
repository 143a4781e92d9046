//! CSV and JSON exports. Floats use 17 significant digits in exponent
//! notation, so identical inputs give byte-identical files.

use std::fmt::Write as _;

use serde::Serialize;

use crate::bands::BandGrid;
use crate::error::{LapError, Result};
use crate::fermi::{BranchPoint, ComplexBranch, LevelSetData};
use crate::lap::LapResult;

/// Fixed float formatting used by every export.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn axis_names(prefix: &str, dim: usize) -> Vec<String> {
    (1..=dim).map(|k| format!("{prefix}{k}")).collect()
}

fn push_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

pub fn bands_header(dim: usize) -> String {
    let mut h = axis_names("alpha", dim);
    h.push("band".into());
    h.push("mu".into());
    h.extend(axis_names("dmu", dim));
    h.join(",")
}

/// `alpha1[,alpha2],band,mu,dmu1[,dmu2]`; gradients are empty at degeneracies.
pub fn bands_csv(grid: &BandGrid) -> String {
    let mut out = bands_header(grid.dim);
    out.push('\n');
    for node in &grid.nodes {
        for (b, grad) in node.bands.iter().zip(&node.gradients) {
            let mut row: Vec<String> = node.alpha.iter().map(|v| fmt_f64(*v)).collect();
            row.push(b.band_index.to_string());
            row.push(fmt_f64(b.mu));
            match grad {
                Some(g) => row.extend(g.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat(String::new()).take(grid.dim)),
            }
            push_row(&mut out, &row);
        }
    }
    out
}

pub fn fermi_header(dim: usize) -> String {
    let mut h = vec!["band".to_string(), "segment".into(), "point".into()];
    h.extend(axis_names("alpha", dim));
    h.extend(axis_names("grad", dim));
    h.push("grad_dot_n".into());
    h.push("tag".into());
    h.join(",")
}

/// `band,segment,point,alpha1[,alpha2],grad1[,grad2],grad_dot_n,tag`.
pub fn fermi_csv(level: &LevelSetData) -> String {
    let mut out = fermi_header(level.dim);
    out.push('\n');
    for (si, seg) in level.segments.iter().enumerate() {
        for (pi, p) in seg.points.iter().enumerate() {
            let mut row = vec![seg.band.to_string(), si.to_string(), pi.to_string()];
            row.extend(p.alpha.iter().map(|v| fmt_f64(*v)));
            row.extend(p.grad.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(p.grad_dot_n));
            row.push(p.tag.as_str().to_string());
            push_row(&mut out, &row);
        }
    }
    out
}

pub fn fermi_complex_header(dim: usize) -> String {
    let mut h = vec!["band".to_string()];
    h.extend(axis_names("anchor", dim));
    h.extend(["gamma", "re_s", "im_s", "G", "sign"].map(String::from));
    h.join(",")
}

/// `band,anchor1[,anchor2],gamma,re_s,im_s,G,sign`, one row per branch sample.
pub fn fermi_complex_csv(dim: usize, branches: &[(&ComplexBranch, &[BranchPoint])]) -> String {
    let mut out = fermi_complex_header(dim);
    out.push('\n');
    for (br, samples) in branches {
        for p in *samples {
            let mut row = vec![br.band.to_string()];
            row.extend(br.anchor.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(p.gamma));
            row.push(fmt_f64(p.s.re));
            row.push(fmt_f64(p.s.im));
            row.push(fmt_f64(p.g_s));
            row.push(fmt_f64(br.sign_s));
            push_row(&mut out, &row);
        }
    }
    out
}

pub fn solution_header(dim: usize) -> String {
    let mut h = axis_names("x", dim);
    h.extend(
        ["re_total", "im_total", "re_evan", "im_evan", "re_prop", "im_prop", "re_cext", "im_cext"].map(String::from),
    );
    h.join(",")
}

/// `x1[,x2],re_total,im_total,re_evan,im_evan,re_prop,im_prop,re_cext,im_cext`.
pub fn solution_csv(dim: usize, results: &[LapResult]) -> String {
    let mut out = solution_header(dim);
    out.push('\n');
    for r in results {
        let mut row: Vec<String> = r.x.iter().map(|v| fmt_f64(*v)).collect();
        for z in [r.total, r.evanescent, r.propagating, r.complex_ext] {
            row.push(fmt_f64(z.re));
            row.push(fmt_f64(z.im));
        }
        push_row(&mut out, &row);
    }
    out
}

pub const CONVERGENCE_HEADER: &str = "epsilon,max_abs_error";

/// `epsilon,max_abs_error`.
pub fn convergence_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    for (e, err) in rows {
        let _ = writeln!(out, "{},{}", fmt_f64(*e), fmt_f64(*err));
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| LapError::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
