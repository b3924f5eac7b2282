//! Sparse square systems: CSR storage, ILU(0) preconditioning and BiCGSTAB.

use crate::error::{Error, Result};

/// Compressed sparse rows with sorted column indices per row.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            y[i] = s;
        }
    }

    fn diag_positions(&self) -> Vec<Option<usize>> {
        (0..self.n).map(|i| (self.row_ptr[i]..self.row_ptr[i + 1]).find(|&p| self.cols[p] == i)).collect()
    }
}

/// Incomplete LU factorization with the sparsity of the matrix itself.
struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    fn new(a: &CsrMatrix) -> Option<Self> {
        let mut lu = a.clone();
        let diag: Vec<usize> = a.diag_positions().into_iter().collect::<Option<_>>()?;
        let mut iw = vec![usize::MAX; a.n];
        for i in 0..a.n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for p in start..end {
                iw[lu.cols[p]] = p;
            }
            for p in start..end {
                let k = lu.cols[p];
                if k >= i {
                    break;
                }
                let pivot = lu.vals[diag[k]];
                if pivot == 0.0 {
                    return None;
                }
                lu.vals[p] /= pivot;
                let lik = lu.vals[p];
                for q in diag[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.cols[q];
                    if iw[j] != usize::MAX {
                        let w = iw[j];
                        lu.vals[w] -= lik * lu.vals[q];
                    }
                }
            }
            for p in start..end {
                iw[lu.cols[p]] = usize::MAX;
            }
            if lu.vals[diag[i]] == 0.0 || !lu.vals[diag[i]].is_finite() {
                return None;
            }
        }
        Some(Ilu0 { lu, diag })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let a = &self.lu;
        for i in 0..a.n {
            let mut s = r[i];
            for p in a.row_ptr[i]..self.diag[i] {
                s -= a.vals[p] * z[a.cols[p]];
            }
            z[i] = s;
        }
        for i in (0..a.n).rev() {
            let mut s = z[i];
            for p in self.diag[i] + 1..a.row_ptr[i + 1] {
                s -= a.vals[p] * z[a.cols[p]];
            }
            z[i] = s / a.vals[self.diag[i]];
        }
    }
}

enum Precond {
    Ilu(Ilu0),
    Jacobi(Vec<f64>),
}

impl Precond {
    fn new(a: &CsrMatrix) -> Self {
        if let Some(ilu) = Ilu0::new(a) {
            return Precond::Ilu(ilu);
        }
        let inv = a
            .diag_positions()
            .iter()
            .map(|p| match p {
                Some(p) if a.vals[*p] != 0.0 => 1.0 / a.vals[*p],
                _ => 1.0,
            })
            .collect();
        Precond::Jacobi(inv)
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Ilu(ilu) => ilu.apply(r, z),
            Precond::Jacobi(d) => z.iter_mut().zip(r).zip(d).for_each(|((z, r), d)| *z = r * d),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` for each right-hand side with preconditioned BiCGSTAB.
/// `x` holds the initial guesses on entry.
pub fn solve(a: &CsrMatrix, rhs: &[Vec<f64>], x: &mut [Vec<f64>], tol: f64, max_iter: usize) -> Result<()> {
    let m = Precond::new(a);
    for (b, x) in rhs.iter().zip(x.iter_mut()) {
        bicgstab(a, &m, b, x, tol, max_iter)?;
    }
    Ok(())
}

fn bicgstab(a: &CsrMatrix, m: &Precond, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<()> {
    let n = a.n;
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let mut r = vec![0.0; n];
    a.mul_into(x, &mut r);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let mut rel = norm(&r) / bnorm;
    if rel < tol {
        return Ok(());
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        m.apply(&p, &mut p_hat);
        a.mul_into(&p_hat, &mut v);
        let den = dot(&r_hat, &v);
        if den == 0.0 {
            break;
        }
        alpha = rho / den;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm < tol {
            x.iter_mut().zip(&p_hat).for_each(|(x, p)| *x += alpha * p);
            return Ok(());
        }
        m.apply(&s, &mut s_hat);
        a.mul_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm(&r) / bnorm;
        if rel < tol {
            return Ok(());
        }
        if omega == 0.0 {
            break;
        }
    }
    // Recompute the true residual before giving up.
    a.mul_into(x, &mut r);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    rel = norm(&r) / bnorm;
    if rel < tol {
        Ok(())
    } else {
        Err(Error::SolverDiverged(rel))
    }
}
