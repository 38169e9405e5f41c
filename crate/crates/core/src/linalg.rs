//! Sparse storage and the iterative/direct solvers used by the cell and
//! diffusion problems. Reductions run in a fixed order so results do not
//! depend on scheduling.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from unsorted triplets; duplicates are summed in insertion order.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        // stable sort keeps the summation order of duplicates deterministic
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("nonempty") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `alpha * I + beta * self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            t.push((i, i, alpha));
            for (j, v) in self.row(i) {
                t.push((i, j, beta * v));
            }
        }
        Self::from_triplets(self.n, t)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t.push((j, i, v));
            }
        }
        Self::from_triplets(self.n, t)
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut d: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d = d.max((v - self.get(j, i)).abs());
            }
        }
        d / scale
    }

    pub fn bandwidth(&self) -> usize {
        let mut b = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                b = b.max(i.abs_diff(j));
            }
        }
        b
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_mean_zero(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct IterativeOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Solve on the quotient by constants (singular periodic systems).
    pub mean_zero: bool,
}

impl IterativeOptions {
    pub fn new(rel_tol: f64, n: usize) -> Self {
        IterativeOptions {
            rel_tol,
            max_iter: 20 * n + 100,
            mean_zero: false,
        }
    }
}

/// Jacobi-preconditioned conjugate gradient. With `mean_zero` the
/// preconditioner is dropped and iterates are projected onto the mean-zero
/// subspace each iteration.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: IterativeOptions) -> Result<SolveStats> {
    let n = a.n();
    let mut rhs = b.to_vec();
    if opts.mean_zero {
        project_mean_zero(&mut rhs);
        project_mean_zero(x);
    }
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let inv_diag: Vec<f64> = if opts.mean_zero {
        vec![1.0; n]
    } else {
        a.diagonal().iter().map(|d| 1.0 / d).collect()
    };
    let mut ax = a.apply(x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, y)| b - y).collect();
    if opts.mean_zero {
        project_mean_zero(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm(&r) / bnorm;
    let mut it = 0;
    while res > opts.rel_tol {
        if it >= opts.max_iter {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        a.matvec(&p, &mut ax);
        let pap = dot(&p, &ax);
        if !(pap > 0.0) {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ax[i];
        }
        if opts.mean_zero {
            project_mean_zero(&mut r);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = norm(&r) / bnorm;
        it += 1;
    }
    if opts.mean_zero {
        project_mean_zero(x);
    }
    // report the true residual, not the recursively updated one
    a.matvec(x, &mut ax);
    let mut tr: Vec<f64> = rhs.iter().zip(&ax).map(|(b, y)| b - y).collect();
    if opts.mean_zero {
        project_mean_zero(&mut tr);
    }
    Ok(SolveStats {
        iterations: it,
        residual: norm(&tr) / bnorm,
    })
}

/// BiCGSTAB for nonsymmetric systems, with the same mean-zero option.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: IterativeOptions) -> Result<SolveStats> {
    let n = a.n();
    let mut rhs = b.to_vec();
    if opts.mean_zero {
        project_mean_zero(&mut rhs);
        project_mean_zero(x);
    }
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let fix = |v: &mut Vec<f64>| {
        if opts.mean_zero {
            project_mean_zero(v);
        }
    };
    let mut r: Vec<f64> = {
        let ax = a.apply(x);
        rhs.iter().zip(&ax).map(|(b, y)| b - y).collect()
    };
    fix(&mut r);
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    let mut it = 0;
    while res > opts.rel_tol {
        if it >= opts.max_iter {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        a.matvec(&p, &mut v);
        fix(&mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm <= opts.rel_tol {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            it += 1;
            break;
        }
        a.matvec(&s, &mut t);
        fix(&mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / bnorm;
        it += 1;
    }
    if opts.mean_zero {
        project_mean_zero(x);
    }
    let ax = a.apply(x);
    let mut tr: Vec<f64> = rhs.iter().zip(&ax).map(|(b, y)| b - y).collect();
    fix(&mut tr);
    let residual = norm(&tr) / bnorm;
    if residual > 10.0 * opts.rel_tol {
        return Err(Error::NoConvergence { iterations: it, residual });
    }
    Ok(SolveStats { iterations: it, residual })
}

/// Pre-factored tridiagonal system (Thomas algorithm).
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    sub: Vec<f64>,
    inv_pivot: Vec<f64>,
    sup_mod: Vec<f64>,
}

impl Tridiagonal {
    pub fn factor(a: &CsrMatrix) -> Option<Self> {
        if a.bandwidth() > 1 {
            return None;
        }
        let n = a.n();
        let sub: Vec<f64> = (0..n).map(|i| if i > 0 { a.get(i, i - 1) } else { 0.0 }).collect();
        let diag = a.diagonal();
        let sup: Vec<f64> = (0..n).map(|i| if i + 1 < n { a.get(i, i + 1) } else { 0.0 }).collect();
        let mut inv_pivot = vec![0.0; n];
        let mut sup_mod = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            let piv = diag[i] - sub[i] * prev;
            if piv == 0.0 || !piv.is_finite() {
                return None;
            }
            inv_pivot[i] = 1.0 / piv;
            sup_mod[i] = sup[i] * inv_pivot[i];
            prev = sup_mod[i];
        }
        Some(Tridiagonal { sub, inv_pivot, sup_mod })
    }

    pub fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = b.len();
        let mut prev = 0.0;
        for i in 0..n {
            let v = (b[i] - self.sub[i] * prev) * self.inv_pivot[i];
            x[i] = v;
            prev = v;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= self.sup_mod[i] * x[i + 1];
        }
    }
}

/// SPD solve for a fixed matrix: direct when tridiagonal, Jacobi-PCG otherwise.
#[derive(Clone, Debug)]
pub enum SpdSolver {
    Direct(Tridiagonal),
    Pcg { matrix: CsrMatrix, rel_tol: f64 },
}

impl SpdSolver {
    pub fn new(matrix: CsrMatrix, rel_tol: f64, allow_direct: bool) -> Self {
        if allow_direct {
            if let Some(t) = Tridiagonal::factor(&matrix) {
                return SpdSolver::Direct(t);
            }
        }
        SpdSolver::Pcg { matrix, rel_tol }
    }

    /// Solve in place; `x` holds the initial guess on entry.
    pub fn solve(&self, b: &[f64], x: &mut [f64]) -> Result<SolveStats> {
        match self {
            SpdSolver::Direct(t) => {
                t.solve(b, x);
                Ok(SolveStats { iterations: 0, residual: 0.0 })
            }
            SpdSolver::Pcg { matrix, rel_tol } => {
                conjugate_gradient(matrix, b, x, IterativeOptions::new(*rel_tol, matrix.n()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cg_and_thomas_agree() {
        let a = laplace_1d(50).shifted(0.1, 1.0);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let mut x1 = vec![0.0; 50];
        conjugate_gradient(&a, &b, &mut x1, IterativeOptions::new(1e-13, 50)).unwrap();
        let mut x2 = vec![0.0; 50];
        Tridiagonal::factor(&a).unwrap().solve(&b, &mut x2);
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-10);
        }
        let r = a.apply(&x2);
        for (p, q) in r.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn bicgstab_nonsymmetric() {
        let n = 40;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 3.0));
            if i > 0 {
                t.push((i, i - 1, -1.5));
            }
            if i + 1 < n {
                t.push((i, i + 1, -0.5));
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        let st = bicgstab(&a, &b, &mut x, IterativeOptions::new(1e-12, n)).unwrap();
        assert!(st.residual < 1e-11);
    }

    #[test]
    fn cg_reports_nonconvergence() {
        let a = laplace_1d(200);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let opts = IterativeOptions {
            rel_tol: 1e-14,
            max_iter: 3,
            mean_zero: false,
        };
        match conjugate_gradient(&a, &b, &mut x, opts) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
