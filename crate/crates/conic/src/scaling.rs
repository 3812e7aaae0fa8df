//! Ruiz equilibration of the constraint matrices.
//!
//! Rows of one second-order block share a single factor so the cone is
//! mapped onto itself.

use crate::presolve::StandardForm;

const PASSES: usize = 15;
const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;

#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// Column factors: `x = D x̂`.
    pub d: Vec<f64>,
    /// Equality-row factors.
    pub ea: Vec<f64>,
    /// Cone-row factors.
    pub eg: Vec<f64>,
    /// Objective factor.
    pub cs: f64,
}

pub(crate) fn equilibrate(f: &mut StandardForm) -> Scaling {
    let n = f.n;
    let p = f.a.len();
    let m = f.g.len();
    let mut d = vec![1.0; n];
    let mut ea = vec![1.0; p];
    let mut eg = vec![1.0; m];
    let offsets = f.cone.soc_offsets();
    for _ in 0..PASSES {
        let mut col = vec![0.0f64; n];
        for row in f.a.iter().chain(&f.g) {
            for &(j, v) in row {
                col[j] = col[j].max(v.abs());
            }
        }
        let mut rows_a: Vec<f64> = f.a.iter().map(|r| r.iter().fold(0.0f64, |m, e| m.max(e.1.abs()))).collect();
        let mut rows_g: Vec<f64> = f.g.iter().map(|r| r.iter().fold(0.0f64, |m, e| m.max(e.1.abs()))).collect();
        for (off, &dim) in offsets.iter().zip(&f.cone.soc) {
            let mx = rows_g[*off..off + dim].iter().fold(0.0f64, |a, &b| a.max(b));
            rows_g[*off..off + dim].iter_mut().for_each(|v| *v = mx);
        }
        let fac = |v: f64| if v > 0.0 { (1.0 / v.sqrt()).clamp(MIN_SCALE, MAX_SCALE) } else { 1.0 };
        let dc: Vec<f64> = col.iter().map(|&v| fac(v)).collect();
        rows_a.iter_mut().for_each(|v| *v = fac(*v));
        rows_g.iter_mut().for_each(|v| *v = fac(*v));
        let mut done = true;
        for (i, row) in f.a.iter_mut().enumerate() {
            for e in row.iter_mut() {
                e.1 *= rows_a[i] * dc[e.0];
            }
            f.b[i] *= rows_a[i];
            ea[i] *= rows_a[i];
        }
        for (i, row) in f.g.iter_mut().enumerate() {
            for e in row.iter_mut() {
                e.1 *= rows_g[i] * dc[e.0];
            }
            f.h[i] *= rows_g[i];
            eg[i] *= rows_g[i];
        }
        for j in 0..n {
            f.c[j] *= dc[j];
            d[j] *= dc[j];
        }
        for &v in dc.iter().chain(&rows_a).chain(&rows_g) {
            if (v - 1.0).abs() > 1e-3 {
                done = false;
            }
        }
        if done {
            break;
        }
    }
    let cmax = f.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cs = if cmax > 0.0 { 1.0 / cmax.max(1e-6) } else { 1.0 };
    let cs = cs.min(1.0 / 1e-6).max(1e-6);
    f.c.iter_mut().for_each(|v| *v *= cs);
    Scaling { d, ea, eg, cs }
}
