//! Product cone `R₊^l × SOC(d₁) × … × SOC(d_k)`: Jordan algebra, step
//! lengths and Nesterov–Todd scaling.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConeSpec {
    pub nonneg: usize,
    pub soc: Vec<usize>,
}

impl ConeSpec {
    pub fn dim(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    /// Degree of the cone (size of the identity's complementarity budget).
    pub fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }

    /// Start offsets of every second-order block.
    pub fn soc_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.soc.len());
        let mut off = self.nonneg;
        for &d in &self.soc {
            out.push(off);
            off += d;
        }
        out
    }

    pub fn identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.dim()];
        for v in e.iter_mut().take(self.nonneg) {
            *v = 1.0;
        }
        for off in self.soc_offsets() {
            e[off] = 1.0;
        }
        e
    }

    /// `u ∘ v`.
    pub fn jordan(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..self.nonneg {
            out[i] = u[i] * v[i];
        }
        for (off, &d) in self.soc_offsets().into_iter().zip(&self.soc) {
            let u = &u[off..off + d];
            let v = &v[off..off + d];
            out[off] = dot(u, v);
            for i in 1..d {
                out[off + i] = u[0] * v[i] + v[0] * u[i];
            }
        }
    }

    /// Solves `λ ∘ x = v` for `x`.
    pub fn jordan_div(&self, lambda: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..self.nonneg {
            out[i] = v[i] / lambda[i];
        }
        for (off, &d) in self.soc_offsets().into_iter().zip(&self.soc) {
            let l = &lambda[off..off + d];
            let vv = &v[off..off + d];
            let rho = l[0] * l[0] - dot(&l[1..], &l[1..]);
            let x0 = (l[0] * vv[0] - dot(&l[1..], &vv[1..])) / rho;
            out[off] = x0;
            for i in 1..d {
                out[off + i] = (vv[i] - x0 * l[i]) / l[0];
            }
        }
    }

    /// `min_i s_i` over the orthant and `s₀ − ‖s₁‖` over each block.
    pub fn min_margin(&self, s: &[f64]) -> f64 {
        let mut m = f64::INFINITY;
        for &v in &s[..self.nonneg] {
            m = m.min(v);
        }
        for (off, &d) in self.soc_offsets().into_iter().zip(&self.soc) {
            let b = &s[off..off + d];
            m = m.min(b[0] - norm(&b[1..]));
        }
        m
    }

    /// Moves `s` strictly inside the cone along the identity if it is not already.
    pub fn shift_inside(&self, s: &mut [f64]) {
        let alpha = -self.min_margin(s);
        if alpha >= -1e-4 {
            let shift = 1.0 + alpha.max(0.0);
            for v in s.iter_mut().take(self.nonneg) {
                *v += shift;
            }
            for off in self.soc_offsets() {
                s[off] += shift;
            }
        }
    }

    /// Largest `α ∈ [0, cap]` with `s + α·ds` in the cone (`s` interior).
    pub fn max_step(&self, s: &[f64], ds: &[f64], cap: f64) -> f64 {
        let mut alpha = cap;
        for i in 0..self.nonneg {
            if ds[i] < 0.0 {
                alpha = alpha.min(-s[i] / ds[i]);
            }
        }
        for (off, &d) in self.soc_offsets().into_iter().zip(&self.soc) {
            alpha = alpha.min(soc_step(&s[off..off + d], &ds[off..off + d]));
        }
        alpha.max(0.0)
    }
}

fn soc_step(s: &[f64], d: &[f64]) -> f64 {
    let a = d[0] * d[0] - dot(&d[1..], &d[1..]);
    let b = 2.0 * (s[0] * d[0] - dot(&s[1..], &d[1..]));
    let c = (s[0] * s[0] - dot(&s[1..], &s[1..])).max(0.0);
    let mut best = f64::INFINITY;
    if d[0] < 0.0 {
        best = -s[0] / d[0];
    }
    let scale = a.abs().max(b.abs()).max(c.abs()).max(f64::MIN_POSITIVE);
    if a.abs() <= 1e-14 * scale {
        if b < 0.0 {
            best = best.min(-c / b);
        }
        return best;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return best;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = [f64::INFINITY; 2];
    if q != 0.0 {
        roots[0] = q / a;
        roots[1] = c / q;
    } else {
        roots[0] = 0.0;
    }
    for r in roots {
        if r > 0.0 {
            best = best.min(r);
        }
    }
    best
}

/// Nesterov–Todd scaling `W` with `W z = W⁻¹ s = λ`.
#[derive(Debug, Clone)]
pub(crate) struct NtScaling {
    pub orth: Vec<f64>,
    pub soc: Vec<SocScaling>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SocExpansion {
    pub eta2: f64,
    pub d1: f64,
    pub u0: f64,
    pub u1: f64,
    pub v1: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SocScaling {
    pub eta: f64,
    pub wbar: Vec<f64>,
}

impl NtScaling {
    pub fn identity(spec: &ConeSpec) -> Self {
        Self {
            orth: vec![1.0; spec.nonneg],
            soc: spec
                .soc
                .iter()
                .map(|&d| {
                    let mut wbar = vec![0.0; d];
                    wbar[0] = 1.0;
                    SocScaling { eta: 1.0, wbar }
                })
                .collect(),
        }
    }

    /// Computes the scaling at an interior pair; `None` if either point left the cone.
    pub fn update(&mut self, spec: &ConeSpec, s: &[f64], z: &[f64]) -> Option<()> {
        for i in 0..spec.nonneg {
            if !(s[i] > 0.0 && z[i] > 0.0) {
                return None;
            }
            self.orth[i] = (s[i] / z[i]).sqrt();
        }
        for ((off, &d), sc) in spec.soc_offsets().into_iter().zip(&spec.soc).zip(&mut self.soc) {
            let sb = &s[off..off + d];
            let zb = &z[off..off + d];
            let s_res = sb[0] * sb[0] - dot(&sb[1..], &sb[1..]);
            let z_res = zb[0] * zb[0] - dot(&zb[1..], &zb[1..]);
            if !(s_res > 0.0 && z_res > 0.0 && sb[0] > 0.0 && zb[0] > 0.0) {
                return None;
            }
            let ss = s_res.sqrt();
            let zs = z_res.sqrt();
            let mut sz = 0.0;
            for i in 0..d {
                sz += sb[i] * zb[i];
            }
            let gamma = ((1.0 + sz / (ss * zs)) / 2.0).sqrt();
            sc.wbar[0] = (sb[0] / ss + zb[0] / zs) / (2.0 * gamma);
            for i in 1..d {
                sc.wbar[i] = (sb[i] / ss - zb[i] / zs) / (2.0 * gamma);
            }
            // Re-normalize so that w̄ stays on the unit hyperboloid.
            let w1sq = dot(&sc.wbar[1..], &sc.wbar[1..]);
            sc.wbar[0] = (1.0 + w1sq).sqrt();
            sc.eta = (s_res / z_res).sqrt().sqrt();
        }
        Some(())
    }

    /// `out = W v`.
    pub fn apply(&self, spec: &ConeSpec, v: &[f64], out: &mut [f64]) {
        for i in 0..spec.nonneg {
            out[i] = self.orth[i] * v[i];
        }
        for ((off, &d), sc) in spec.soc_offsets().into_iter().zip(&spec.soc).zip(&self.soc) {
            let w = &sc.wbar;
            let vb = &v[off..off + d];
            let w1v1 = dot(&w[1..], &vb[1..]);
            out[off] = sc.eta * (w[0] * vb[0] + w1v1);
            let coef = vb[0] + w1v1 / (1.0 + w[0]);
            for i in 1..d {
                out[off + i] = sc.eta * (vb[i] + coef * w[i]);
            }
        }
    }

    /// `out = W⁻¹ v`.
    pub fn apply_inv(&self, spec: &ConeSpec, v: &[f64], out: &mut [f64]) {
        for i in 0..spec.nonneg {
            out[i] = v[i] / self.orth[i];
        }
        for ((off, &d), sc) in spec.soc_offsets().into_iter().zip(&spec.soc).zip(&self.soc) {
            let w = &sc.wbar;
            let vb = &v[off..off + d];
            let w1v1 = dot(&w[1..], &vb[1..]);
            out[off] = (w[0] * vb[0] - w1v1) / sc.eta;
            let coef = vb[0] - w1v1 / (1.0 + w[0]);
            for i in 1..d {
                out[off + i] = (vb[i] - coef * w[i]) / sc.eta;
            }
        }
    }

    /// Factors `W² = η²(D + uuᵀ − vvᵀ)` for second-order block `k`, with
    /// `D = diag(d₁, 1, …, 1)`, `u = (u₀, u₁w̄₁)` and `v = (0, v₁w̄₁)`.
    pub fn soc_expansion(&self, k: usize) -> SocExpansion {
        let sc = &self.soc[k];
        let a = sc.wbar[0];
        let base = 2.0 * a * a - 1.0;
        let d1 = 0.5 / base;
        let u0 = (base - d1).sqrt();
        SocExpansion {
            eta2: sc.eta * sc.eta,
            d1,
            u0,
            u1: 2.0 * a / u0,
            v1: (2.0 * (1.0 + d1)).sqrt() / u0,
        }
    }

    /// Entry `(i, j)` of the block `W²` for second-order block `k`.
    #[cfg(test)]
    pub fn soc_w2(&self, k: usize, i: usize, j: usize) -> f64 {
        let sc = &self.soc[k];
        let jij = if i == j {
            if i == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        sc.eta * sc.eta * (2.0 * sc.wbar[i] * sc.wbar[j] - jij)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
