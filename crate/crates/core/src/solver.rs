//! Preconditioned conjugate gradients for the cut-cell operator.
//!
//! The preconditioner is a zero-fill incomplete Cholesky factorisation in
//! `(D + L) D⁻¹ (D + Lᵀ)` form, swept in unknown order. Reductions use a fixed
//! chunking, so results do not depend on the number of threads.

use rayon::prelude::*;

use crate::grid::{CellGrid, NONE};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final relative residual `‖b − Mx‖ / ‖b‖`.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Incomplete Cholesky pivots for the operator of `grid`.
pub struct IncompleteCholesky {
    pivots: Vec<f64>,
}

impl IncompleteCholesky {
    pub fn new(grid: &CellGrid) -> Self {
        let n = grid.n_unknowns();
        let mut pivots = vec![0.0; n];
        for i in 0..n {
            let mut d = grid.operator_diagonal(i);
            for &nb in grid.neighbors(i) {
                if nb != NONE && (nb as usize) < i {
                    // off-diagonal entries of M are −1
                    d -= 1.0 / pivots[nb as usize];
                }
            }
            pivots[i] = d;
        }
        IncompleteCholesky { pivots }
    }

    fn apply(&self, grid: &CellGrid, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        // forward: (D + L) y = r
        for i in 0..n {
            let mut acc = r[i];
            for &nb in grid.neighbors(i) {
                if nb != NONE && (nb as usize) < i {
                    acc += z[nb as usize];
                }
            }
            z[i] = acc / self.pivots[i];
        }
        // backward: (D + Lᵀ) z = D y
        for i in (0..n).rev() {
            let mut acc = 0.0;
            for &nb in grid.neighbors(i) {
                if nb != NONE && (nb as usize) > i {
                    acc += z[nb as usize];
                }
            }
            z[i] += acc / self.pivots[i];
        }
    }
}

/// Solve `M x = b` to relative residual `tol`, starting from `x`.
/// Returns `Err(stats)` if the iteration budget is exhausted.
pub fn pcg(
    grid: &CellGrid,
    precond: &IncompleteCholesky,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats, SolveStats> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    grid.apply_operator(x, &mut r);
    r.par_iter_mut().zip(b.par_iter()).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z = vec![0.0; n];
    precond.apply(grid, &r, &mut z);
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while res > tol && it < max_iter {
        grid.apply_operator(&p, &mut q);
        let alpha = rz / dot(&p, &q);
        x.par_iter_mut().zip(p.par_iter()).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(q.par_iter()).for_each(|(ri, qi)| *ri -= alpha * qi);
        res = dot(&r, &r).sqrt() / bnorm;
        it += 1;
        if res <= tol {
            break;
        }
        precond.apply(grid, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    // true residual
    grid.apply_operator(x, &mut q);
    let true_res = q.iter().zip(b).map(|(a, c)| (c - a).powi(2)).sum::<f64>().sqrt() / bnorm;
    let stats = SolveStats { iterations: it, residual: true_res };
    if res <= tol && true_res <= 10.0 * tol {
        Ok(stats)
    } else {
        Err(stats)
    }
}
