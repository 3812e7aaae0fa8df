//! Bound-tightening presolve and conversion to standard form
//! `min cᵀx  s.t.  Ax = b,  Gx + s = h,  s ∈ K`.
//!
//! Fixed variables are substituted, singleton rows become bounds, and
//! columns that no longer appear anywhere are set to their best bound.

use crate::cones::ConeSpec;
use crate::program::{ConicProgram, LinExpr};

/// Sparse row `Σ aⱼ xⱼ` over reduced column indices.
pub(crate) type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub n: usize,
    pub c: Vec<f64>,
    pub a: Vec<SparseRow>,
    pub b: Vec<f64>,
    pub g: Vec<SparseRow>,
    pub h: Vec<f64>,
    pub cone: ConeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Fixed(f64),
    Free(usize),
}

#[derive(Debug)]
pub(crate) enum Presolved {
    Infeasible(String),
    Unbounded,
    Reduced(Reduction),
}

#[derive(Debug)]
pub(crate) struct Reduction {
    columns: Vec<Column>,
    pub form: StandardForm,
}

impl Reduction {
    /// Maps a reduced-space point back to the original variables.
    pub fn expand(&self, xr: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| match *c {
                Column::Fixed(v) => v,
                Column::Free(j) => xr[j],
            })
            .collect()
    }
}

const FIX_TOL: f64 = 1e-9;

pub(crate) fn presolve(prog: &ConicProgram) -> Presolved {
    let nv = prog.num_vars();
    let mut lb: Vec<f64> = prog
        .variables()
        .iter()
        .map(|v| v.lower.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut ub: Vec<f64> = prog
        .variables()
        .iter()
        .map(|v| v.upper.unwrap_or(f64::INFINITY))
        .collect();
    let mut fixed: Vec<Option<f64>> = vec![None; nv];
    for i in 0..nv {
        if lb[i] == ub[i] {
            fixed[i] = Some(lb[i]);
        }
    }
    let mut eq_active = vec![true; prog.equalities().len()];
    let mut le_active = vec![true; prog.inequalities().len()];

    // Substitutes fixed values; returns remaining terms and the adjusted rhs.
    fn reduce(expr: &LinExpr, rhs: f64, fixed: &[Option<f64>]) -> (Vec<(usize, f64)>, f64) {
        let mut r = rhs;
        let mut terms = Vec::with_capacity(expr.terms.len());
        for &(v, c) in &expr.terms {
            match fixed[v.0] {
                Some(val) => r -= c * val,
                None => terms.push((v.0, c)),
            }
        }
        (terms, r)
    }

    let mut changed = true;
    while changed {
        changed = false;
        for (k, row) in prog.equalities().iter().enumerate() {
            if !eq_active[k] {
                continue;
            }
            let (terms, r) = reduce(&row.expr, row.rhs, &fixed);
            let scale = 1.0 + row.rhs.abs();
            match terms.len() {
                0 => {
                    if r.abs() > 1e-8 * scale {
                        return Presolved::Infeasible(format!("equality row {} reduces to 0 = {}", k, r));
                    }
                    eq_active[k] = false;
                    changed = true;
                }
                1 => {
                    let (j, a) = terms[0];
                    let mut val = r / a;
                    let tol = FIX_TOL * (1.0 + val.abs());
                    if val < lb[j] - tol || val > ub[j] + tol {
                        return Presolved::Infeasible(format!(
                            "equality row {} forces x{} = {} outside [{}, {}]",
                            k, j, val, lb[j], ub[j]
                        ));
                    }
                    val = val.clamp(lb[j], ub[j]);
                    fixed[j] = Some(val);
                    lb[j] = val;
                    ub[j] = val;
                    eq_active[k] = false;
                    changed = true;
                }
                _ => {}
            }
        }
        for (k, row) in prog.inequalities().iter().enumerate() {
            if !le_active[k] {
                continue;
            }
            let (terms, r) = reduce(&row.expr, row.rhs, &fixed);
            let scale = 1.0 + row.rhs.abs();
            match terms.len() {
                0 => {
                    if r < -1e-8 * scale {
                        return Presolved::Infeasible(format!("inequality row {} reduces to 0 <= {}", k, r));
                    }
                    le_active[k] = false;
                    changed = true;
                }
                1 => {
                    let (j, a) = terms[0];
                    let bound = r / a;
                    if a > 0.0 {
                        ub[j] = ub[j].min(bound);
                    } else {
                        lb[j] = lb[j].max(bound);
                    }
                    le_active[k] = false;
                    changed = true;
                    let tol = FIX_TOL * (1.0 + lb[j].abs().max(ub[j].abs()).min(1e12));
                    if lb[j] > ub[j] + tol {
                        return Presolved::Infeasible(format!(
                            "bounds of x{} cross after tightening: [{}, {}]",
                            j, lb[j], ub[j]
                        ));
                    }
                    if ub[j] - lb[j] <= tol {
                        let v = if lb[j].is_finite() { lb[j] } else { ub[j] };
                        lb[j] = v;
                        ub[j] = v;
                        fixed[j] = Some(v);
                    }
                }
                _ => {}
            }
        }
    }

    // Cone rows after substitution.
    let mut cone_rows: Vec<Vec<(Vec<(usize, f64)>, f64)>> = Vec::new();
    for (k, cone) in prog.cones().iter().enumerate() {
        let entries: Vec<(Vec<(usize, f64)>, f64)> = cone
            .standard_entries()
            .iter()
            .map(|e| {
                let (terms, r) = reduce(e, 0.0, &fixed);
                // `reduce` moved fixed contributions to the right-hand side.
                (terms, e.constant - r)
            })
            .collect();
        if entries.iter().all(|(t, _)| t.is_empty()) {
            let t = entries[0].1;
            let u: f64 = entries[1..].iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            if u - t > 1e-8 * (1.0 + t.abs()) {
                return Presolved::Infeasible(format!("cone {} violated by fixed values", k));
            }
            continue;
        }
        cone_rows.push(entries);
    }

    // Columns that appear in no remaining row.
    let mut used = vec![false; nv];
    for (k, row) in prog.equalities().iter().enumerate() {
        if eq_active[k] {
            row.expr.terms.iter().for_each(|t| used[t.0 .0] = true);
        }
    }
    for (k, row) in prog.inequalities().iter().enumerate() {
        if le_active[k] {
            row.expr.terms.iter().for_each(|t| used[t.0 .0] = true);
        }
    }
    for entries in &cone_rows {
        for (terms, _) in entries {
            terms.iter().for_each(|t| used[t.0] = true);
        }
    }
    let mut cost = vec![0.0; nv];
    for &(v, c) in &prog.objective().terms {
        cost[v.0] += c;
    }
    for j in 0..nv {
        if fixed[j].is_some() || used[j] {
            continue;
        }
        let v = if cost[j] > 0.0 {
            lb[j]
        } else if cost[j] < 0.0 {
            ub[j]
        } else {
            0.0f64.clamp(lb[j], ub[j])
        };
        if !v.is_finite() {
            return Presolved::Unbounded;
        }
        fixed[j] = Some(v);
    }

    let mut columns = Vec::with_capacity(nv);
    let mut n = 0;
    for j in 0..nv {
        match fixed[j] {
            Some(v) => columns.push(Column::Fixed(v)),
            None => {
                columns.push(Column::Free(n));
                n += 1;
            }
        }
    }
    let col = |j: usize| match columns[j] {
        Column::Free(i) => i,
        Column::Fixed(_) => unreachable!(),
    };
    let mut c = vec![0.0; n];
    for j in 0..nv {
        match columns[j] {
            Column::Fixed(_) => {}
            Column::Free(i) => c[i] = cost[j],
        }
    }

    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, row) in prog.equalities().iter().enumerate() {
        if eq_active[k] {
            let (terms, r) = reduce(&row.expr, row.rhs, &fixed);
            a.push(terms.into_iter().map(|(j, v)| (col(j), v)).collect());
            b.push(r);
        }
    }
    let mut g: Vec<SparseRow> = Vec::new();
    let mut h = Vec::new();
    for (k, row) in prog.inequalities().iter().enumerate() {
        if le_active[k] {
            let (terms, r) = reduce(&row.expr, row.rhs, &fixed);
            g.push(terms.into_iter().map(|(j, v)| (col(j), v)).collect());
            h.push(r);
        }
    }
    for j in 0..nv {
        if fixed[j].is_some() {
            continue;
        }
        if lb[j].is_finite() {
            g.push(vec![(col(j), -1.0)]);
            h.push(-lb[j]);
        }
        if ub[j].is_finite() {
            g.push(vec![(col(j), 1.0)]);
            h.push(ub[j]);
        }
    }
    let nonneg = g.len();
    let mut soc = Vec::with_capacity(cone_rows.len());
    for entries in cone_rows {
        soc.push(entries.len());
        for (terms, constant) in entries {
            // s = a·x + constant  ⇔  (−a)·x + s = constant.
            g.push(terms.into_iter().map(|(j, v)| (col(j), -v)).collect());
            h.push(constant);
        }
    }
    Presolved::Reduced(Reduction {
        columns,
        form: StandardForm {
            n,
            c,
            a,
            b,
            g,
            h,
            cone: ConeSpec { nonneg, soc },
        },
    })
}
