//! Primal-dual interior-point method on the homogeneous self-dual embedding
//! with Nesterov–Todd scaling and Mehrotra predictor-corrector steps.

use crate::cones::{dot, norm_inf, ConeSpec, NtScaling};
use crate::ldl::{LdlFactor, UpperCsc};
use crate::presolve::{presolve, Presolved, SparseRow, StandardForm};
use crate::program::ConicProgram;
use crate::scaling::{equilibrate, Scaling};
use crate::{SolveResult, SolveStatus, SolverConfig};

const STATIC_REG: f64 = 1e-8;
/// Static regularization levels tried in turn when a factorization breaks down.
const STATIC_REG_RETRY: [f64; 3] = [STATIC_REG, 1e-6, 1e-4];
const DYN_EPS: f64 = 1e-13;
const DYN_DELTA: f64 = 2e-7;
const STEP_FRACTION: f64 = 0.99;
const REFINE_STEPS: usize = 10;
/// Reduced tolerance on residuals, gap and infeasibility certificates that a
/// stalled run must meet to be reported as solved.
const REDUCED_TOL: f64 = 5e-5;

pub(crate) fn solve(prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult {
    let red = match presolve(prog) {
        Presolved::Infeasible(why) => {
            log::debug!("presolve: {}", why);
            return SolveResult::without_point(SolveStatus::Infeasible, 0);
        }
        Presolved::Unbounded => return SolveResult::without_point(SolveStatus::Unbounded, 0),
        Presolved::Reduced(r) => r,
    };
    let (status, xr, iters) = if red.form.n == 0 {
        (SolveStatus::Optimal, Vec::new(), 0)
    } else {
        let mut form = red.form.clone();
        let sc = equilibrate(&mut form);
        let out = Ipm::new(&red.form, &form, sc, cfg).run();
        (out.status, out.x, out.iterations)
    };
    match status {
        SolveStatus::Infeasible | SolveStatus::Unbounded => SolveResult::without_point(status, iters),
        _ if xr.len() != red.form.n => SolveResult::without_point(status, iters),
        _ => {
            let x = red.expand(&xr);
            let objective = prog.objective_value(&x);
            let max_residual = prog.residuals(&x).max();
            let optimal = status == SolveStatus::Optimal;
            SolveResult {
                status,
                objective,
                x,
                gap: if optimal { 0.0 } else { f64::INFINITY },
                bound: if optimal { objective } else { f64::NEG_INFINITY },
                max_residual,
                iterations: iters,
                nodes: 0,
            }
        }
    }
}

struct IpmOutcome {
    status: SolveStatus,
    x: Vec<f64>,
    iterations: usize,
}

/// Slots of one expanded second-order block.
struct SocSlots {
    diag: Vec<usize>,
    v: Vec<usize>,
    u: Vec<usize>,
    tv: usize,
    tu: usize,
}

/// Quasi-definite KKT matrix `[δI Aᵀ Gᵀ; A −δI 0; G 0 −(W²+δI)]`, with the
/// second-order part of `W²` in expanded form.
struct Kkt {
    /// Rows of the unexpanded system.
    base: usize,
    dim: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pos: Vec<usize>,
    diag_pos: Vec<usize>,
    sign: Vec<f64>,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    psign: Vec<f64>,
    mat: UpperCsc,
    factor: LdlFactor,
    z_orth: Vec<usize>,
    z_soc: Vec<SocSlots>,
    work: Vec<f64>,
    full_rhs: Vec<f64>,
    full_x: Vec<f64>,
}

impl Kkt {
    fn new(f: &StandardForm) -> Self {
        let (n, p, m) = (f.n, f.a.len(), f.g.len());
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag_trip = vec![0usize; n + p + m];
        let push = |r: usize, c: usize, v: f64, rows: &mut Vec<usize>, cols: &mut Vec<usize>, vals: &mut Vec<f64>| {
            rows.push(r);
            cols.push(c);
            vals.push(v);
            rows.len() - 1
        };
        for j in 0..n {
            diag_trip[j] = push(j, j, 0.0, &mut rows, &mut cols, &mut vals);
        }
        for (r, row) in f.a.iter().enumerate() {
            for &(j, v) in row {
                push(j, n + r, v, &mut rows, &mut cols, &mut vals);
            }
            diag_trip[n + r] = push(n + r, n + r, 0.0, &mut rows, &mut cols, &mut vals);
        }
        for (r, row) in f.g.iter().enumerate() {
            for &(j, v) in row {
                push(j, n + p + r, v, &mut rows, &mut cols, &mut vals);
            }
        }
        let mut z_orth = Vec::with_capacity(f.cone.nonneg);
        for r in 0..f.cone.nonneg {
            let i = n + p + r;
            let t = push(i, i, -1.0, &mut rows, &mut cols, &mut vals);
            diag_trip[i] = t;
            z_orth.push(t);
        }
        // Second-order blocks in expanded form: diagonal `η²D` plus two
        // auxiliary rows carrying the rank-one terms `η²uuᵀ` and `−η²vvᵀ`.
        let mut aux = n + p + m;
        let mut z_soc = Vec::with_capacity(f.cone.soc.len());
        for (off, &d) in f.cone.soc_offsets().into_iter().zip(&f.cone.soc) {
            let (tv, tu) = (aux, aux + 1);
            aux += 2;
            let mut block = SocSlots { diag: Vec::with_capacity(d), v: Vec::with_capacity(d - 1), u: Vec::with_capacity(d), tv: 0, tu: 0 };
            for i in 0..d {
                let gi = n + p + off + i;
                let t = push(gi, gi, -1.0, &mut rows, &mut cols, &mut vals);
                diag_trip[gi] = t;
                block.diag.push(t);
                if i > 0 {
                    block.v.push(push(gi, tv, 0.0, &mut rows, &mut cols, &mut vals));
                }
                block.u.push(push(gi, tu, 0.0, &mut rows, &mut cols, &mut vals));
            }
            block.tv = push(tv, tv, -1.0, &mut rows, &mut cols, &mut vals);
            block.tu = push(tu, tu, 1.0, &mut rows, &mut cols, &mut vals);
            z_soc.push(block);
        }
        let dim = aux;
        diag_trip.resize(dim, 0);
        for b in &z_soc {
            diag_trip[rows[b.tv]] = b.tv;
            diag_trip[rows[b.tu]] = b.tu;
        }

        // Fill-reducing ordering on the upper pattern.
        let csc = to_csc(dim, &rows, &cols);
        let (perm, pinv) = if dim > 1 {
            match amd::order::<usize>(dim, &csc.0, &csc.1, &amd::Control::default()) {
                Ok((p, pi, _)) => (p, pi),
                Err(e) => {
                    log::warn!("AMD ordering failed ({:?}); using natural order", e);
                    ((0..dim).collect(), (0..dim).collect())
                }
            }
        } else {
            ((0..dim).collect(), (0..dim).collect())
        };

        // Permuted upper triangle with a map from triplets to storage slots.
        let prow: Vec<usize> = (0..rows.len()).map(|k| pinv[rows[k]].min(pinv[cols[k]])).collect();
        let pcol: Vec<usize> = (0..rows.len()).map(|k| pinv[rows[k]].max(pinv[cols[k]])).collect();
        let mut colptr = vec![0usize; dim + 1];
        for &c in &pcol {
            colptr[c + 1] += 1;
        }
        for c in 0..dim {
            colptr[c + 1] += colptr[c];
        }
        let mut next = colptr.clone();
        let mut rowind = vec![0usize; rows.len()];
        let mut pos = vec![0usize; rows.len()];
        for k in 0..rows.len() {
            let slot = next[pcol[k]];
            next[pcol[k]] += 1;
            rowind[slot] = prow[k];
            pos[k] = slot;
        }
        let mat = UpperCsc {
            n: dim,
            colptr,
            rowind,
            values: vec![0.0; rows.len()],
        };
        let factor = LdlFactor::symbolic(&mat);
        let mut sign: Vec<f64> = (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        for b in &z_soc {
            sign[rows[b.tu]] = 1.0;
        }
        let mut psign = vec![0.0; dim];
        for i in 0..dim {
            psign[pinv[i]] = sign[i];
        }
        let diag_pos = diag_trip.iter().map(|&t| pos[t]).collect();

        Self {
            base: n + p + m,
            dim,
            rows,
            cols,
            vals,
            pos,
            diag_pos,
            sign,
            perm,
            pinv,
            psign,
            mat,
            factor,
            z_orth,
            z_soc,
            work: vec![0.0; dim],
            full_rhs: vec![0.0; dim],
            full_x: vec![0.0; dim],
        }
    }

    fn set_scaling(&mut self, w: &NtScaling) {
        for (i, &t) in self.z_orth.iter().enumerate() {
            self.vals[t] = -w.orth[i] * w.orth[i];
        }
        for (k, block) in self.z_soc.iter().enumerate() {
            let e = w.soc_expansion(k);
            let wbar = &w.soc[k].wbar;
            for (i, &t) in block.diag.iter().enumerate() {
                self.vals[t] = -e.eta2 * if i == 0 { e.d1 } else { 1.0 };
            }
            for (i, &t) in block.v.iter().enumerate() {
                self.vals[t] = e.eta2 * e.v1 * wbar[i + 1];
            }
            for (i, &t) in block.u.iter().enumerate() {
                self.vals[t] = e.eta2 * if i == 0 { e.u0 } else { e.u1 * wbar[i] };
            }
            self.vals[block.tv] = -e.eta2;
            self.vals[block.tu] = e.eta2;
        }
    }

    /// Factors with static regularization `reg`; false when a pivot is not finite.
    fn factor(&mut self, reg: f64) -> bool {
        for k in 0..self.vals.len() {
            self.mat.values[self.pos[k]] = self.vals[k];
        }
        for i in 0..self.dim {
            self.mat.values[self.diag_pos[i]] += self.sign[i] * reg;
        }
        self.factor.numeric(&self.mat, &self.psign, DYN_EPS, DYN_DELTA);
        self.factor.is_finite()
    }

    /// Unregularized product `K v` on the expanded system.
    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.vals.len() {
            let (r, c, a) = (self.rows[k], self.cols[k], self.vals[k]);
            out[r] += a * v[c];
            if r != c {
                out[c] += a * v[r];
            }
        }
    }

    fn raw_solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            self.work[self.pinv[i]] = rhs[i];
        }
        self.factor.solve(&mut self.work);
        for k in 0..self.dim {
            out[self.perm[k]] = self.work[k];
        }
    }

    /// Solves the unexpanded system for `x` given `rhs`, both of length `base`.
    fn solve(&mut self, rhs: &[f64], x: &mut [f64]) {
        let mut full_rhs = std::mem::take(&mut self.full_rhs);
        let mut full_x = std::mem::take(&mut self.full_x);
        full_rhs[..self.base].copy_from_slice(rhs);
        full_rhs[self.base..].iter_mut().for_each(|v| *v = 0.0);
        self.refined_solve(&full_rhs, &mut full_x);
        x.copy_from_slice(&full_x[..self.base]);
        self.full_rhs = full_rhs;
        self.full_x = full_x;
    }

    /// Solves `K x = rhs` with iterative refinement against the unregularized matrix.
    fn refined_solve(&mut self, rhs: &[f64], x: &mut [f64]) {
        self.raw_solve(rhs, x);
        let bnorm = norm_inf(rhs);
        let mut kx = vec![0.0; self.dim];
        let mut r = vec![0.0; self.dim];
        let mut dx = vec![0.0; self.dim];
        let mut prev = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            self.matvec(x, &mut kx);
            for i in 0..self.dim {
                r[i] = rhs[i] - kx[i];
            }
            let rn = norm_inf(&r);
            if rn <= 1e-14 * (1.0 + bnorm) || rn >= prev * 0.5 {
                break;
            }
            prev = rn;
            self.raw_solve(&r, &mut dx);
            for i in 0..self.dim {
                x[i] += dx[i];
            }
        }
    }
}

fn to_csc(dim: usize, rows: &[usize], cols: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut colptr = vec![0usize; dim + 1];
    for &c in cols {
        colptr[c + 1] += 1;
    }
    for c in 0..dim {
        colptr[c + 1] += colptr[c];
    }
    let mut next = colptr.clone();
    let mut rowind = vec![0usize; rows.len()];
    for k in 0..rows.len() {
        rowind[next[cols[k]]] = rows[k];
        next[cols[k]] += 1;
    }
    for c in 0..dim {
        rowind[colptr[c]..colptr[c + 1]].sort_unstable();
    }
    (colptr, rowind)
}

fn mul_rows(rows: &[SparseRow], x: &[f64], out: &mut [f64]) {
    for (i, row) in rows.iter().enumerate() {
        out[i] = row.iter().map(|&(j, v)| v * x[j]).sum();
    }
}

fn mul_rows_t(rows: &[SparseRow], y: &[f64], out: &mut [f64]) {
    for (i, row) in rows.iter().enumerate() {
        let yi = y[i];
        if yi != 0.0 {
            for &(j, v) in row {
                out[j] += v * yi;
            }
        }
    }
}

struct Ipm<'a> {
    f: &'a StandardForm,
    sc: Scaling,
    cfg: &'a SolverConfig,
    kkt: Kkt,
    norm_b: f64,
    norm_h: f64,
    norm_c: f64,
}

#[derive(Clone)]
struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

impl<'a> Ipm<'a> {
    fn new(orig: &StandardForm, f: &'a StandardForm, sc: Scaling, cfg: &'a SolverConfig) -> Self {
        // Scaled form is borrowed; norms of the unscaled data drive the stopping test.
        let kkt = Kkt::new(f);
        Self {
            f,
            sc,
            cfg,
            kkt,
            norm_b: norm_inf(&orig.b),
            norm_h: norm_inf(&orig.h),
            norm_c: norm_inf(&orig.c),
        }
    }

    fn cone(&self) -> &ConeSpec {
        &self.f.cone
    }

    fn initial_point(&mut self) -> Iterate {
        let (n, p, m) = (self.f.n, self.f.a.len(), self.f.g.len());
        let cone = self.f.cone.clone();
        let w = NtScaling::identity(&cone);
        self.kkt.set_scaling(&w);
        self.kkt.factor(STATIC_REG);
        let dim = n + p + m;
        let mut rhs = vec![0.0; dim];
        rhs[n..n + p].copy_from_slice(&self.f.b);
        rhs[n + p..].copy_from_slice(&self.f.h);
        let mut sol = vec![0.0; dim];
        self.kkt.solve(&rhs, &mut sol);
        let x = sol[..n].to_vec();
        let mut s: Vec<f64> = sol[n + p..].iter().map(|v| -v).collect();
        cone.shift_inside(&mut s);

        let mut rhs = vec![0.0; dim];
        for j in 0..n {
            rhs[j] = -self.f.c[j];
        }
        self.kkt.solve(&rhs, &mut sol);
        let y = sol[n..n + p].to_vec();
        let mut z = sol[n + p..].to_vec();
        cone.shift_inside(&mut z);
        Iterate {
            x,
            y,
            z,
            s,
            tau: 1.0,
            kappa: 1.0,
        }
    }

    fn run(mut self) -> IpmOutcome {
        let (n, p, m) = (self.f.n, self.f.a.len(), self.f.g.len());
        let dim = n + p + m;
        let cone = self.cone().clone();
        let degree = cone.degree() as f64;
        let mut it = self.initial_point();
        let mut w = NtScaling::identity(&cone);

        let mut rx = vec![0.0; n];
        let mut ry = vec![0.0; p];
        let mut rz = vec![0.0; m];
        let mut ax = vec![0.0; p];
        let mut gx = vec![0.0; m];
        let mut lambda = vec![0.0; m];
        let mut rhs = vec![0.0; dim];
        let mut sol1 = vec![0.0; dim];
        let mut sol2 = vec![0.0; dim];
        let mut tmp = vec![0.0; m];
        let mut tmp2 = vec![0.0; m];
        let mut psi = vec![0.0; m];
        let mut ds = vec![0.0; m];
        let mut dz = vec![0.0; m];
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; p];
        let e = cone.identity();
        let mut stalls = 0;
        let mut best: Option<(f64, Iterate)> = None;
        let mut best_cert = f64::INFINITY;

        for iter in 0..self.cfg.max_iter {
            // Residuals of the embedding.
            rx.iter_mut().for_each(|v| *v = 0.0);
            mul_rows_t(&self.f.a, &it.y, &mut rx);
            mul_rows_t(&self.f.g, &it.z, &mut rx);
            for j in 0..n {
                rx[j] += self.f.c[j] * it.tau;
            }
            mul_rows(&self.f.a, &it.x, &mut ax);
            for i in 0..p {
                ry[i] = ax[i] - self.f.b[i] * it.tau;
            }
            mul_rows(&self.f.g, &it.x, &mut gx);
            for i in 0..m {
                rz[i] = it.s[i] + gx[i] - self.f.h[i] * it.tau;
            }
            let cx = dot(&self.f.c, &it.x);
            let by = dot(&self.f.b, &it.y);
            let hz = dot(&self.f.h, &it.z);
            let rtau = it.kappa + cx + by + hz;

            // Stopping tests on unscaled quantities.
            let cs = self.sc.cs;
            let tau = it.tau;
            let pres_a = (0..p).map(|i| (ry[i] / self.sc.ea[i]).abs()).fold(0.0, f64::max) / tau;
            let pres_g = (0..m).map(|i| (rz[i] / self.sc.eg[i]).abs()).fold(0.0, f64::max) / tau;
            let pres = (pres_a / (1.0 + self.norm_b)).max(pres_g / (1.0 + self.norm_h));
            let dres = (0..n).map(|j| (rx[j] / self.sc.d[j]).abs()).fold(0.0, f64::max) / (cs * tau) / (1.0 + self.norm_c);
            let gap = dot(&it.s, &it.z) / (cs * tau * tau);
            let pcost = cx / (cs * tau);
            let dcost = -(by + hz) / (cs * tau);
            let relgap = if pcost < 0.0 && dcost < 0.0 {
                gap / (-pcost).min(-dcost)
            } else if pcost > 0.0 && dcost > 0.0 {
                gap / pcost.min(dcost)
            } else {
                f64::INFINITY
            };
            log::trace!(
                "iter {:3} pcost {:+.6e} dcost {:+.6e} gap {:.2e} pres {:.2e} dres {:.2e} k/t {:.2e} tau {:.2e}",
                iter, pcost, dcost, gap, pres, dres, it.kappa / it.tau, it.tau
            );
            let merit = pres.max(dres).max(gap.min(relgap));
            if merit.is_finite() && best.as_ref().map_or(true, |b| merit < b.0) {
                best = Some((merit, it.clone()));
            }
            if pres < self.cfg.feas_tol
                && dres < self.cfg.feas_tol
                && (gap < self.cfg.ipm_gap_tol || relgap < self.cfg.ipm_gap_tol)
            {
                return self.finish(SolveStatus::Optimal, &it, iter);
            }
            if it.kappa > it.tau {
                if by + hz < 0.0 {
                    let mut aty = vec![0.0; n];
                    mul_rows_t(&self.f.a, &it.y, &mut aty);
                    mul_rows_t(&self.f.g, &it.z, &mut aty);
                    let r = (0..n).map(|j| (aty[j] / self.sc.d[j]).abs()).fold(0.0, f64::max);
                    let cert = r / (-(by + hz));
                    log::trace!("infeasibility certificate {:.2e}", cert);
                    best_cert = best_cert.min(cert);
                    if cert < self.cfg.feas_tol {
                        return IpmOutcome { status: SolveStatus::Infeasible, x: Vec::new(), iterations: iter };
                    }
                }
                if cx < 0.0 {
                    let ra = (0..p).map(|i| (ax[i] / self.sc.ea[i]).abs()).fold(0.0, f64::max);
                    let rg = (0..m).map(|i| ((gx[i] + it.s[i]) / self.sc.eg[i]).abs()).fold(0.0, f64::max);
                    if ra.max(rg) * cs / (-cx) < self.cfg.feas_tol {
                        return IpmOutcome { status: SolveStatus::Unbounded, x: Vec::new(), iterations: iter };
                    }
                }
            }

            if w.update(&cone, &it.s, &it.z).is_none() {
                log::debug!("iterate left the cone at iteration {}", iter);
                return self.fallback(best, best_cert, &it, iter);
            }
            w.apply(&cone, &it.z, &mut lambda);
            let mu = (dot(&it.s, &it.z) + it.tau * it.kappa) / (degree + 1.0);

            self.kkt.set_scaling(&w);

            // Direction for the τ column.
            for j in 0..n {
                rhs[j] = -self.f.c[j];
            }
            rhs[n..n + p].copy_from_slice(&self.f.b);
            rhs[n + p..].copy_from_slice(&self.f.h);
            let mut factored = false;
            for &reg in &STATIC_REG_RETRY {
                if self.kkt.factor(reg) {
                    self.kkt.solve(&rhs, &mut sol1);
                    if sol1.iter().all(|v| v.is_finite()) {
                        factored = true;
                        break;
                    }
                }
                log::debug!("factorization broke down at iteration {} with regularization {:e}", iter, reg);
            }
            if !factored {
                return self.fallback(best, best_cert, &it, iter);
            }
            let denom_base = dot(&self.f.c, &sol1[..n]) + dot(&self.f.b, &sol1[n..n + p]) + dot(&self.f.h, &sol1[n + p..]);

            // Predictor.
            for i in 0..m {
                psi[i] = -lambda[i];
            }
            let dkap_rhs = -it.tau * it.kappa;
            let (dtau_a, dkap_a) = self.direction(
                &cone, &w, 1.0, &rx, &ry, &rz, rtau, &psi, dkap_rhs, &it, &sol1, denom_base,
                &mut rhs, &mut sol2, &mut tmp, &mut dx, &mut dy, &mut dz, &mut ds,
            );
            let alpha_a = self.step_length(&cone, &it, &ds, &dz, dtau_a, dkap_a, 1.0);
            let sigma = (1.0 - alpha_a).powi(3).clamp(0.0, 1.0);

            // Corrector: d_s = −λ∘λ + σμe − (W⁻¹Δs_a)∘(WΔz_a).
            w.apply_inv(&cone, &ds, &mut tmp);
            w.apply(&cone, &dz, &mut tmp2);
            let mut corr = vec![0.0; m];
            cone.jordan(&tmp, &tmp2, &mut corr);
            let mut ll = vec![0.0; m];
            cone.jordan(&lambda, &lambda, &mut ll);
            let mut dsv = vec![0.0; m];
            for i in 0..m {
                dsv[i] = -ll[i] + sigma * mu * e[i] - corr[i];
            }
            cone.jordan_div(&lambda, &dsv, &mut psi);
            let dkap_rhs = -it.tau * it.kappa + sigma * mu - dtau_a * dkap_a;
            let (dtau, dkap) = self.direction(
                &cone, &w, 1.0 - sigma, &rx, &ry, &rz, rtau, &psi, dkap_rhs, &it, &sol1, denom_base,
                &mut rhs, &mut sol2, &mut tmp, &mut dx, &mut dy, &mut dz, &mut ds,
            );
            let alpha = (STEP_FRACTION * self.step_length(&cone, &it, &ds, &dz, dtau, dkap, 1.0 / STEP_FRACTION)).min(1.0);
            if !alpha.is_finite() || alpha < 1e-10 {
                stalls += 1;
                if stalls >= 3 {
                    log::debug!("step length collapsed at iteration {}", iter);
                    return self.fallback(best, best_cert, &it, iter);
                }
            } else {
                stalls = 0;
            }
            for j in 0..n {
                it.x[j] += alpha * dx[j];
            }
            for i in 0..p {
                it.y[i] += alpha * dy[i];
            }
            for i in 0..m {
                it.z[i] += alpha * dz[i];
                it.s[i] += alpha * ds[i];
            }
            it.tau += alpha * dtau;
            it.kappa += alpha * dkap;
            if !(it.tau > 0.0 && it.kappa > 0.0) || it.x.iter().any(|v| !v.is_finite()) {
                log::debug!("lost positivity at iteration {} (tau {:e}, kappa {:e}, alpha {:e})", iter, it.tau, it.kappa, alpha);
                return self.fallback(best, best_cert, &it, iter);
            }
        }
        let iters = self.cfg.max_iter;
        self.fallback(best, best_cert, &it, iters)
    }

    /// Solves the reduced Newton system for one right-hand side; returns `(Δτ, Δκ)`.
    #[allow(clippy::too_many_arguments)]
    fn direction(
        &mut self,
        cone: &ConeSpec,
        w: &NtScaling,
        weight: f64,
        rx: &[f64],
        ry: &[f64],
        rz: &[f64],
        rtau: f64,
        psi: &[f64],
        dkap_rhs: f64,
        it: &Iterate,
        sol1: &[f64],
        denom_base: f64,
        rhs: &mut [f64],
        sol2: &mut [f64],
        tmp: &mut [f64],
        dx: &mut [f64],
        dy: &mut [f64],
        dz: &mut [f64],
        ds: &mut [f64],
    ) -> (f64, f64) {
        let (n, p, m) = (self.f.n, self.f.a.len(), self.f.g.len());
        w.apply(cone, psi, tmp);
        for j in 0..n {
            rhs[j] = -weight * rx[j];
        }
        for i in 0..p {
            rhs[n + i] = -weight * ry[i];
        }
        for i in 0..m {
            rhs[n + p + i] = -weight * rz[i] - tmp[i];
        }
        self.kkt.solve(rhs, sol2);
        let num = -weight * rtau - dkap_rhs / it.tau
            - (dot(&self.f.c, &sol2[..n]) + dot(&self.f.b, &sol2[n..n + p]) + dot(&self.f.h, &sol2[n + p..]));
        let den = denom_base - it.kappa / it.tau;
        let dtau = num / den;
        for j in 0..n {
            dx[j] = sol2[j] + dtau * sol1[j];
        }
        for i in 0..p {
            dy[i] = sol2[n + i] + dtau * sol1[n + i];
        }
        for i in 0..m {
            dz[i] = sol2[n + p + i] + dtau * sol1[n + p + i];
        }
        // Δs = W(ψ − W Δz).
        w.apply(cone, dz, ds);
        for i in 0..m {
            tmp[i] = psi[i] - ds[i];
        }
        w.apply(cone, tmp, ds);
        let dkap = (dkap_rhs - it.kappa * dtau) / it.tau;
        (dtau, dkap)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_length(&self, cone: &ConeSpec, it: &Iterate, ds: &[f64], dz: &[f64], dtau: f64, dkap: f64, cap: f64) -> f64 {
        let mut a = cone.max_step(&it.s, ds, cap);
        a = a.min(cone.max_step(&it.z, dz, cap));
        if dtau < 0.0 {
            a = a.min(-it.tau / dtau);
        }
        if dkap < 0.0 {
            a = a.min(-it.kappa / dkap);
        }
        a
    }

    /// Ends a run that stopped making progress: the best iterate counts as
    /// optimal, or the best certificate as infeasibility, when it meets the
    /// reduced tolerance.
    fn fallback(&self, best: Option<(f64, Iterate)>, best_cert: f64, last: &Iterate, iterations: usize) -> IpmOutcome {
        let tol = REDUCED_TOL.max(self.cfg.feas_tol).max(self.cfg.ipm_gap_tol);
        match best {
            Some((merit, it)) if merit <= tol => {
                log::debug!("accepting best iterate at reduced accuracy (merit {:.2e})", merit);
                self.finish(SolveStatus::Optimal, &it, iterations)
            }
            _ if best_cert <= tol => {
                log::debug!("accepting infeasibility certificate at reduced accuracy ({:.2e})", best_cert);
                IpmOutcome { status: SolveStatus::Infeasible, x: Vec::new(), iterations }
            }
            Some((_, it)) => self.finish(SolveStatus::IterationLimit, &it, iterations),
            None => self.finish(SolveStatus::IterationLimit, last, iterations),
        }
    }

    fn finish(&self, status: SolveStatus, it: &Iterate, iterations: usize) -> IpmOutcome {
        let x = if it.tau > 0.0 {
            (0..self.f.n).map(|j| self.sc.d[j] * it.x[j] / it.tau).collect()
        } else {
            Vec::new()
        };
        IpmOutcome { status, x, iterations }
    }
}
