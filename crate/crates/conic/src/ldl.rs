//! Sparse LDLᵀ factorization of quasi-definite matrices.
//!
//! Input is the upper triangle of a symmetric matrix in compressed-column
//! form, already permuted. The elimination tree and column counts are computed
//! once; numeric refactorization reuses them. Pivots with the wrong sign or
//! negligible magnitude are replaced by a signed regularization constant.

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub(crate) struct UpperCsc {
    pub n: usize,
    pub colptr: Vec<usize>,
    pub rowind: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct LdlFactor {
    n: usize,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // Workspace.
    y_vals: Vec<f64>,
    y_used: Vec<bool>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    next_space: Vec<usize>,
    pub regularized_pivots: usize,
}

impl LdlFactor {
    pub fn symbolic(a: &UpperCsc) -> Self {
        let n = a.n;
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in a.colptr[j]..a.colptr[j + 1] {
                let mut i = a.rowind[p];
                debug_assert!(i <= j, "matrix is not upper triangular");
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz = lp[n];
        Self {
            n,
            etree,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            y_vals: vec![0.0; n],
            y_used: vec![false; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            next_space: vec![0; n],
            regularized_pivots: 0,
        }
    }

    /// Numeric factorization. `signs[k]` is the expected pivot sign (±1).
    pub fn numeric(&mut self, a: &UpperCsc, signs: &[f64], eps: f64, delta: f64) {
        let n = self.n;
        self.regularized_pivots = 0;
        for i in 0..n {
            self.next_space[i] = self.lp[i];
            self.y_used[i] = false;
            self.y_vals[i] = 0.0;
        }
        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in a.colptr[k]..a.colptr[k + 1] {
                let bidx = a.rowind[p];
                if bidx == k {
                    self.d[k] = a.values[p];
                    continue;
                }
                self.y_vals[bidx] = a.values[p];
                if !self.y_used[bidx] {
                    self.y_used[bidx] = true;
                    self.elim[0] = bidx;
                    let mut nnz_e = 1;
                    let mut next = self.etree[bidx];
                    while next != NONE && next < k {
                        if self.y_used[next] {
                            break;
                        }
                        self.y_used[next] = true;
                        self.elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let tmp = self.next_space[c];
                let yc = self.y_vals[c];
                for j in self.lp[c]..tmp {
                    self.y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                let l = yc * self.dinv[c];
                self.lx[tmp] = l;
                self.d[k] -= yc * l;
                self.next_space[c] += 1;
                self.y_vals[c] = 0.0;
                self.y_used[c] = false;
            }
            if self.d[k] * signs[k] <= eps {
                self.d[k] = signs[k] * delta;
                self.regularized_pivots += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
    }

    /// True when every pivot is finite.
    pub fn is_finite(&self) -> bool {
        self.d.iter().all(|v| v.is_finite())
    }

    /// Solves `L D Lᵀ x = b` in place.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }

    #[cfg(test)]
    pub fn nnz(&self) -> usize {
        self.lp[self.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_to_upper(m: &[Vec<f64>]) -> UpperCsc {
        let n = m.len();
        let mut colptr = vec![0];
        let mut rowind = Vec::new();
        let mut values = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if m[i][j] != 0.0 {
                    rowind.push(i);
                    values.push(m[i][j]);
                }
            }
            colptr.push(rowind.len());
        }
        UpperCsc { n, colptr, rowind, values }
    }

    #[test]
    fn solves_quasi_definite_system() {
        let m = vec![
            vec![4.0, 1.0, 0.0, 2.0],
            vec![1.0, 3.0, 1.0, 0.0],
            vec![0.0, 1.0, -2.0, 0.5],
            vec![2.0, 0.0, 0.5, -3.0],
        ];
        let a = dense_to_upper(&m);
        let mut f = LdlFactor::symbolic(&a);
        f.numeric(&a, &[1.0, 1.0, -1.0, -1.0], 1e-14, 1e-9);
        assert_eq!(f.regularized_pivots, 0);
        let b = [1.0, -2.0, 0.5, 3.0];
        let mut x = b.to_vec();
        f.solve(&mut x);
        for i in 0..4 {
            let r: f64 = (0..4).map(|j| m[i][j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12, "row {} residual {}", i, r - b[i]);
        }
    }

    #[test]
    fn diagonal_matrix_has_no_fill() {
        let m = vec![vec![2.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 5.0]];
        let a = dense_to_upper(&m);
        let mut f = LdlFactor::symbolic(&a);
        f.numeric(&a, &[1.0, -1.0, 1.0], 1e-14, 1e-9);
        assert_eq!(f.nnz(), 0);
        let mut x = vec![2.0, 1.0, 10.0];
        f.solve(&mut x);
        assert_eq!(x, vec![1.0, -1.0, 2.0]);
    }

    #[test]
    fn wrong_sign_pivot_is_regularized() {
        let m = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let a = dense_to_upper(&m);
        let mut f = LdlFactor::symbolic(&a);
        f.numeric(&a, &[1.0, -1.0], 1e-14, 1e-7);
        assert_eq!(f.regularized_pivots, 1);
    }
}
