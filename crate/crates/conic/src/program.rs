//! Cone-standard-form problem representation.
//!
//! A [`ConicProgram`] is assembled through a [`ProgramBuilder`] and sealed
//! once every row has been added. Sealing validates references and bounds;
//! the sealed program is immutable and can be shared across threads.

use std::fmt;
use std::io::{self, Write};

use crate::ConicError;

/// Index of a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// Affine expression `Σ coeff·var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        Self {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(v: VarId, coeff: f64) -> Self {
        Self {
            terms: vec![(v, coeff)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((v, coeff));
        }
        self
    }

    pub fn with(mut self, v: VarId, coeff: f64) -> Self {
        self.add_term(v, coeff);
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        for &(v, c) in &other.terms {
            self.add_term(v, c * scale);
        }
        self.constant += other.constant * scale;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(v, c)| acc + c * x[v.0])
    }

    /// Merges duplicate variables and drops zero coefficients; output sorted by variable.
    pub fn normalized(&self) -> LinExpr {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|t| t.0);
        let mut out: Vec<(VarId, f64)> = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        LinExpr {
            terms: out,
            constant: self.constant,
        }
    }
}

impl From<VarId> for LinExpr {
    fn from(v: VarId) -> Self {
        LinExpr::var(v)
    }
}

/// Conic row.
#[derive(Debug, Clone, PartialEq)]
pub enum ConeRow {
    /// `a·b ≥ Σ cᵢ²` with `a, b ≥ 0`.
    Rotated {
        a: LinExpr,
        b: LinExpr,
        rest: Vec<LinExpr>,
    },
    /// `‖u‖₂ ≤ t`.
    Standard { t: LinExpr, u: Vec<LinExpr> },
}

impl ConeRow {
    fn exprs(&self) -> Box<dyn Iterator<Item = &LinExpr> + '_> {
        match self {
            ConeRow::Rotated { a, b, rest } => {
                Box::new(std::iter::once(a).chain(std::iter::once(b)).chain(rest))
            }
            ConeRow::Standard { t, u } => Box::new(std::iter::once(t).chain(u)),
        }
    }

    /// Membership violation at `x` (zero when inside the cone).
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            ConeRow::Rotated { a, b, rest } => {
                let av = a.eval(x);
                let bv = b.eval(x);
                let sq: f64 = rest.iter().map(|e| e.eval(x).powi(2)).sum();
                // Expressed on the equivalent standard cone so the measure is
                // homogeneous of degree one.
                let t = av + bv;
                let u = ((av - bv).powi(2) + 4.0 * sq).sqrt();
                (u - t).max(0.0) / 2.0
            }
            ConeRow::Standard { t, u } => {
                let tv = t.eval(x);
                let norm = u.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                (norm - tv).max(0.0)
            }
        }
    }

    /// Number of entries of the equivalent standard cone.
    pub fn dim(&self) -> usize {
        match self {
            ConeRow::Rotated { rest, .. } => rest.len() + 2,
            ConeRow::Standard { u, .. } => u.len() + 1,
        }
    }

    /// Entries of the equivalent standard second-order cone `(t, u)`.
    pub(crate) fn standard_entries(&self) -> Vec<LinExpr> {
        match self {
            ConeRow::Rotated { a, b, rest } => {
                let mut out = Vec::with_capacity(rest.len() + 2);
                let mut t = a.clone();
                t.add_expr(b, 1.0);
                let mut d = a.clone();
                d.add_expr(b, -1.0);
                out.push(t.normalized());
                out.push(d.normalized());
                for e in rest {
                    let mut s = LinExpr::new();
                    s.add_expr(e, 2.0);
                    out.push(s.normalized());
                }
                out
            }
            ConeRow::Standard { t, u } => std::iter::once(t)
                .chain(u)
                .map(|e| e.normalized())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub binary: bool,
}

/// Linear row `expr = rhs` or `expr ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRow {
    pub expr: LinExpr,
    pub rhs: f64,
}

impl LinRow {
    fn activity(&self, x: &[f64]) -> f64 {
        self.expr.eval(x) - self.rhs
    }
}

/// Sealed second-order cone program (minimization).
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    vars: Vec<Variable>,
    objective: LinExpr,
    eqs: Vec<LinRow>,
    les: Vec<LinRow>,
    cones: Vec<ConeRow>,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn equalities(&self) -> &[LinRow] {
        &self.eqs
    }

    pub fn inequalities(&self) -> &[LinRow] {
        &self.les
    }

    pub fn cones(&self) -> &[ConeRow] {
        &self.cones
    }

    pub fn binaries(&self) -> impl Iterator<Item = VarId> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.binary)
            .map(|(i, _)| VarId(i))
    }

    pub fn num_binaries(&self) -> usize {
        self.vars.iter().filter(|v| v.binary).count()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
    }

    /// Copy of the program with some variables pinned to fixed values.
    pub fn with_fixed(&self, fixings: &[(VarId, f64)]) -> ConicProgram {
        let mut out = self.clone();
        for &(v, val) in fixings {
            let var = &mut out.vars[v.0];
            var.lower = Some(val);
            var.upper = Some(val);
        }
        out
    }

    /// Copy of the program with every binary treated as a continuous [0,1] variable.
    pub fn relaxed(&self) -> ConicProgram {
        let mut out = self.clone();
        for v in &mut out.vars {
            v.binary = false;
        }
        out
    }

    /// Independent feasibility audit of a primal point.
    pub fn residuals(&self, x: &[f64]) -> Residuals {
        let mut r = Residuals::default();
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(lb) = v.lower {
                r.bounds = r.bounds.max(lb - x[i]);
            }
            if let Some(ub) = v.upper {
                r.bounds = r.bounds.max(x[i] - ub);
            }
        }
        for row in &self.eqs {
            r.equality = r.equality.max(row.activity(x).abs());
        }
        for row in &self.les {
            r.inequality = r.inequality.max(row.activity(x));
        }
        for cone in &self.cones {
            r.cone = r.cone.max(cone.violation(x));
        }
        r
    }

    /// Writes one line per variable and constraint. Not a stable format.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        fn expr_str(e: &LinExpr) -> String {
            let mut s = String::new();
            for &(v, c) in &e.terms {
                s.push_str(&format!("{:+e}*{} ", c, v));
            }
            if e.constant != 0.0 || e.terms.is_empty() {
                s.push_str(&format!("{:+e}", e.constant));
            }
            s.trim_end().to_string()
        }
        writeln!(
            w,
            "# vars={} eq={} le={} cones={}",
            self.vars.len(),
            self.eqs.len(),
            self.les.len(),
            self.cones.len()
        )?;
        for (i, v) in self.vars.iter().enumerate() {
            writeln!(
                w,
                "var x{} {} lb={} ub={}{}",
                i,
                v.name,
                v.lower.map_or("-inf".into(), |b| format!("{:e}", b)),
                v.upper.map_or("+inf".into(), |b| format!("{:e}", b)),
                if v.binary { " binary" } else { "" }
            )?;
        }
        writeln!(w, "min {}", expr_str(&self.objective))?;
        for (i, row) in self.eqs.iter().enumerate() {
            writeln!(w, "eq{} {} = {:e}", i, expr_str(&row.expr), row.rhs)?;
        }
        for (i, row) in self.les.iter().enumerate() {
            writeln!(w, "le{} {} <= {:e}", i, expr_str(&row.expr), row.rhs)?;
        }
        for (i, cone) in self.cones.iter().enumerate() {
            match cone {
                ConeRow::Rotated { a, b, rest } => {
                    let rest: Vec<String> = rest.iter().map(|e| format!("({})", expr_str(e))).collect();
                    writeln!(
                        w,
                        "rsoc{} ({})*({}) >= sumsq[{}]",
                        i,
                        expr_str(a),
                        expr_str(b),
                        rest.join(", ")
                    )?;
                }
                ConeRow::Standard { t, u } => {
                    let u: Vec<String> = u.iter().map(|e| format!("({})", expr_str(e))).collect();
                    writeln!(w, "soc{} norm[{}] <= {}", i, u.join(", "), expr_str(t))?;
                }
            }
        }
        Ok(())
    }
}

/// Worst-case violations per constraint family.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Residuals {
    pub bounds: f64,
    pub equality: f64,
    pub inequality: f64,
    pub cone: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.bounds
            .max(self.equality)
            .max(self.inequality)
            .max(self.cone)
    }
}

/// Incremental constructor for [`ConicProgram`].
#[derive(Debug, Clone, Default)]
pub struct ProgramBuilder {
    vars: Vec<Variable>,
    objective: LinExpr,
    eqs: Vec<LinRow>,
    les: Vec<LinRow>,
    cones: Vec<ConeRow>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: Option<f64>, upper: Option<f64>) -> VarId {
        self.vars.push(Variable {
            name: name.into(),
            lower,
            upper,
            binary: false,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn add_free(&mut self, name: impl Into<String>) -> VarId {
        self.add_var(name, None, None)
    }

    pub fn add_nonneg(&mut self, name: impl Into<String>) -> VarId {
        self.add_var(name, Some(0.0), None)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        self.vars.push(Variable {
            name: name.into(),
            lower: Some(0.0),
            upper: Some(1.0),
            binary: true,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn set_bounds(&mut self, v: VarId, lower: Option<f64>, upper: Option<f64>) {
        let var = &mut self.vars[v.0];
        var.lower = lower;
        var.upper = upper;
    }

    pub fn set_objective(&mut self, obj: LinExpr) {
        self.objective = obj;
    }

    pub fn add_objective_term(&mut self, v: VarId, coeff: f64) {
        self.objective.add_term(v, coeff);
    }

    /// `expr = rhs`; the expression constant is moved to the right-hand side.
    pub fn add_eq(&mut self, expr: LinExpr, rhs: f64) -> usize {
        let rhs = rhs - expr.constant;
        let expr = LinExpr {
            constant: 0.0,
            ..expr
        };
        self.eqs.push(LinRow { expr, rhs });
        self.eqs.len() - 1
    }

    /// `expr ≤ rhs`.
    pub fn add_le(&mut self, expr: LinExpr, rhs: f64) -> usize {
        let rhs = rhs - expr.constant;
        let expr = LinExpr {
            constant: 0.0,
            ..expr
        };
        self.les.push(LinRow { expr, rhs });
        self.les.len() - 1
    }

    /// `expr ≥ rhs`.
    pub fn add_ge(&mut self, expr: LinExpr, rhs: f64) -> usize {
        let mut neg = LinExpr::new();
        neg.add_expr(&expr, -1.0);
        self.add_le(neg, -rhs)
    }

    /// `a·b ≥ Σ restᵢ²`, `a, b ≥ 0`.
    pub fn add_rotated_cone(&mut self, a: LinExpr, b: LinExpr, rest: Vec<LinExpr>) -> usize {
        self.cones.push(ConeRow::Rotated { a, b, rest });
        self.cones.len() - 1
    }

    /// `‖u‖ ≤ t`.
    pub fn add_soc(&mut self, t: LinExpr, u: Vec<LinExpr>) -> usize {
        self.cones.push(ConeRow::Standard { t, u });
        self.cones.len() - 1
    }

    pub fn seal(self) -> Result<ConicProgram, ConicError> {
        let n = self.vars.len();
        let check = |e: &LinExpr, what: &str| -> Result<(), ConicError> {
            for &(v, c) in &e.terms {
                if v.0 >= n {
                    return Err(ConicError::UnknownVariable {
                        var: v.0,
                        context: what.to_string(),
                    });
                }
                if !c.is_finite() {
                    return Err(ConicError::NonFinite(what.to_string()));
                }
            }
            if !e.constant.is_finite() {
                return Err(ConicError::NonFinite(what.to_string()));
            }
            Ok(())
        };
        for (i, v) in self.vars.iter().enumerate() {
            if let (Some(l), Some(u)) = (v.lower, v.upper) {
                if l > u {
                    return Err(ConicError::InvalidBounds { var: i, lower: l, upper: u });
                }
            }
            if v.lower.map_or(false, |b| b.is_nan()) || v.upper.map_or(false, |b| b.is_nan()) {
                return Err(ConicError::NonFinite(format!("bounds of x{}", i)));
            }
            if v.binary {
                let ok = v.lower.map_or(false, |l| l >= 0.0) && v.upper.map_or(false, |u| u <= 1.0);
                if !ok {
                    return Err(ConicError::BinaryBounds(i));
                }
            }
        }
        check(&self.objective, "objective")?;
        for (i, r) in self.eqs.iter().enumerate() {
            check(&r.expr, &format!("equality {}", i))?;
            if !r.rhs.is_finite() {
                return Err(ConicError::NonFinite(format!("equality {}", i)));
            }
        }
        for (i, r) in self.les.iter().enumerate() {
            check(&r.expr, &format!("inequality {}", i))?;
            if !r.rhs.is_finite() {
                return Err(ConicError::NonFinite(format!("inequality {}", i)));
            }
        }
        for (i, c) in self.cones.iter().enumerate() {
            for e in c.exprs() {
                check(e, &format!("cone {}", i))?;
            }
        }
        Ok(ConicProgram {
            vars: self.vars,
            objective: self.objective.normalized(),
            eqs: self
                .eqs
                .into_iter()
                .map(|r| LinRow {
                    expr: r.expr.normalized(),
                    rhs: r.rhs,
                })
                .collect(),
            les: self
                .les
                .into_iter()
                .map(|r| LinRow {
                    expr: r.expr.normalized(),
                    rhs: r.rhs,
                })
                .collect(),
            cones: self.cones,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_rejects_unknown_variable() {
        let mut b = ProgramBuilder::new();
        let x = b.add_free("x");
        b.add_eq(LinExpr::var(x).with(VarId(7), 1.0), 0.0);
        assert!(matches!(b.seal(), Err(ConicError::UnknownVariable { var: 7, .. })));
    }

    #[test]
    fn binary_bounds_enforced() {
        let mut b = ProgramBuilder::new();
        let z = b.add_binary("z");
        b.set_bounds(z, Some(0.0), Some(2.0));
        assert!(matches!(b.seal(), Err(ConicError::BinaryBounds(0))));
    }

    #[test]
    fn normalized_merges_terms() {
        let e = LinExpr::var(VarId(2)).with(VarId(0), 1.0).with(VarId(2), -1.0);
        let n = e.normalized();
        assert_eq!(n.terms, vec![(VarId(0), 1.0)]);
    }

    #[test]
    fn rotated_violation_is_zero_inside() {
        let cone = ConeRow::Rotated {
            a: LinExpr::var(VarId(0)),
            b: LinExpr::var(VarId(1)),
            rest: vec![LinExpr::var(VarId(2))],
        };
        assert_eq!(cone.violation(&[1.0, 1.0, 0.5]), 0.0);
        assert!(cone.violation(&[1.0, 0.1, 1.0]) > 0.0);
    }

    #[test]
    fn constants_move_to_rhs() {
        let mut b = ProgramBuilder::new();
        let x = b.add_free("x");
        let mut e = LinExpr::var(x);
        e.add_constant(2.0);
        b.add_le(e, 5.0);
        let p = b.seal().unwrap();
        assert_eq!(p.inequalities()[0].rhs, 3.0);
    }
}
