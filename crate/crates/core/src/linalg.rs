//! Dense linear-algebra kernels the sensitivity module is built on: a
//! Bunch-Kaufman LDL^T factorization for symmetric indefinite saddle systems
//! and a Jacobi-preconditioned conjugate-gradient solver for the positive
//! definite blocks.

use thiserror::Error;

use crate::problem::{DMat, DVec};

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is numerically singular (pivot {pivot:.3e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("conjugate gradient stalled at relative residual {residual:.3e} (target {target:.3e})")]
    CgStalled { residual: f64, target: f64 },
}

/// Bunch-Kaufman alpha: minimizes the element growth bound for the 1x1/2x2
/// pivot choice.
const BK_ALPHA: f64 = 0.640_388_203_202_208_4; // (1 + sqrt(17)) / 8

enum Pivot {
    Single,
    Double,
}

/// LDL^T factorization of a symmetric matrix with Bunch-Kaufman partial
/// pivoting. Handles indefinite matrices (saddle-point KKT systems); D is
/// block diagonal with 1x1 and 2x2 blocks.
pub struct LdlFactor {
    /// Lower triangle holds L (unit diagonal implicit); the diagonal and the
    /// subdiagonal entries of 2x2 pivots hold D.
    fact: DMat,
    /// Symmetric row/column swap applied at each elimination step
    /// (swaps[k] = r means rows/cols k and r were exchanged before step k).
    swaps: Vec<usize>,
    pivots: Vec<Pivot>,
    /// Start column of each pivot block, in elimination order.
    starts: Vec<usize>,
}

impl LdlFactor {
    /// Factors `a` (only its lower triangle is read). Fails on numerical
    /// singularity relative to the largest absolute entry.
    pub fn new(a: &DMat) -> Result<Self, LinalgError> {
        assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
        let n = a.nrows();
        let mut m = a.clone();
        // Work on the full symmetric matrix for index simplicity.
        for i in 0..n {
            for j in (i + 1)..n {
                m[(i, j)] = m[(j, i)];
            }
        }
        let scale = m.amax().max(1.0);
        let tol = scale * 1e-14 * (n as f64).max(1.0);

        let mut swaps = vec![0usize; n];
        for (k, s) in swaps.iter_mut().enumerate() {
            *s = k;
        }
        let mut pivots = Vec::new();
        let mut starts = Vec::new();

        let mut k = 0;
        while k < n {
            // Largest off-diagonal magnitude in column k at/below row k+1.
            let mut lambda = 0.0;
            let mut r = k;
            for i in (k + 1)..n {
                if m[(i, k)].abs() > lambda {
                    lambda = m[(i, k)].abs();
                    r = i;
                }
            }

            let akk = m[(k, k)].abs();
            let mut use_double = false;
            if lambda > 0.0 && akk < BK_ALPHA * lambda {
                // sigma: largest off-diagonal magnitude in column r (trailing block).
                let mut sigma: f64 = 0.0;
                for i in k..n {
                    if i != r {
                        sigma = sigma.max(m[(i, r)].abs());
                    }
                }
                if akk * sigma < BK_ALPHA * lambda * lambda {
                    if m[(r, r)].abs() >= BK_ALPHA * sigma {
                        sym_swap(&mut m, k, r);
                        swaps[k] = r;
                    } else {
                        sym_swap(&mut m, k + 1, r);
                        swaps[k + 1] = r;
                        use_double = true;
                    }
                }
            }

            if !use_double {
                let d = m[(k, k)];
                if d.abs() <= tol {
                    return Err(LinalgError::Singular { col: k, pivot: d });
                }
                // Snapshot the pivot column: the rank-1 update must read the
                // original entries, not the L multipliers written over them.
                let col: Vec<f64> = ((k + 1)..n).map(|i| m[(i, k)]).collect();
                for i in (k + 1)..n {
                    let lik = col[i - k - 1] / d;
                    for j in (k + 1)..=i {
                        let delta = lik * col[j - k - 1];
                        m[(i, j)] -= delta;
                        if i != j {
                            m[(j, i)] = m[(i, j)];
                        }
                    }
                    m[(i, k)] = lik;
                    m[(k, i)] = lik;
                }
                pivots.push(Pivot::Single);
                starts.push(k);
                k += 1;
            } else {
                let d11 = m[(k, k)];
                let d21 = m[(k + 1, k)];
                let d22 = m[(k + 1, k + 1)];
                let det = d11 * d22 - d21 * d21;
                if det.abs() <= tol * tol {
                    return Err(LinalgError::Singular { col: k, pivot: det });
                }
                let col1: Vec<f64> = ((k + 2)..n).map(|i| m[(i, k)]).collect();
                let col2: Vec<f64> = ((k + 2)..n).map(|i| m[(i, k + 1)]).collect();
                for i in (k + 2)..n {
                    let b1 = col1[i - k - 2];
                    let b2 = col2[i - k - 2];
                    // Row i of L for this block: [b1 b2] * inv([[d11 d21],[d21 d22]]).
                    let l1 = (b1 * d22 - b2 * d21) / det;
                    let l2 = (b2 * d11 - b1 * d21) / det;
                    for j in (k + 2)..=i {
                        let delta = l1 * col1[j - k - 2] + l2 * col2[j - k - 2];
                        m[(i, j)] -= delta;
                        if i != j {
                            m[(j, i)] = m[(i, j)];
                        }
                    }
                    m[(i, k)] = l1;
                    m[(i, k + 1)] = l2;
                    m[(k, i)] = l1;
                    m[(k + 1, i)] = l2;
                }
                pivots.push(Pivot::Double);
                starts.push(k);
                k += 2;
            }
        }

        Ok(Self { fact: m, swaps, pivots, starts })
    }

    /// Solves A x = b for one right-hand side.
    pub fn solve_vec(&self, b: &DVec) -> DVec {
        let n = self.fact.nrows();
        assert_eq!(b.len(), n);
        let mut x = b.clone();

        // Forward permutation (in elimination order).
        for k in 0..n {
            let r = self.swaps[k];
            if r != k {
                x.swap_rows(k, r);
            }
        }
        // Forward substitution with unit lower L.
        for (bi, start) in self.starts.iter().enumerate() {
            let k = *start;
            match self.pivots[bi] {
                Pivot::Single => {
                    for i in (k + 1)..n {
                        x[i] -= self.fact[(i, k)] * x[k];
                    }
                }
                Pivot::Double => {
                    for i in (k + 2)..n {
                        x[i] -= self.fact[(i, k)] * x[k] + self.fact[(i, k + 1)] * x[k + 1];
                    }
                }
            }
        }
        // Block-diagonal solve.
        for (bi, start) in self.starts.iter().enumerate() {
            let k = *start;
            match self.pivots[bi] {
                Pivot::Single => {
                    x[k] /= self.fact[(k, k)];
                }
                Pivot::Double => {
                    let d11 = self.fact[(k, k)];
                    let d21 = self.fact[(k + 1, k)];
                    let d22 = self.fact[(k + 1, k + 1)];
                    let det = d11 * d22 - d21 * d21;
                    let (b1, b2) = (x[k], x[k + 1]);
                    x[k] = (d22 * b1 - d21 * b2) / det;
                    x[k + 1] = (d11 * b2 - d21 * b1) / det;
                }
            }
        }
        // Backward substitution with L^T.
        for (bi, start) in self.starts.iter().enumerate().rev() {
            let k = *start;
            match self.pivots[bi] {
                Pivot::Single => {
                    let mut acc = 0.0;
                    for i in (k + 1)..n {
                        acc += self.fact[(i, k)] * x[i];
                    }
                    x[k] -= acc;
                }
                Pivot::Double => {
                    let (mut a1, mut a2) = (0.0, 0.0);
                    for i in (k + 2)..n {
                        a1 += self.fact[(i, k)] * x[i];
                        a2 += self.fact[(i, k + 1)] * x[i];
                    }
                    x[k] -= a1;
                    x[k + 1] -= a2;
                }
            }
        }
        // Undo permutation in reverse order.
        for k in (0..n).rev() {
            let r = self.swaps[k];
            if r != k {
                x.swap_rows(k, r);
            }
        }
        x
    }

    /// Solves A X = B column by column.
    pub fn solve_mat(&self, b: &DMat) -> DMat {
        let mut out = DMat::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = DVec::from_column_slice(b.column(j).as_slice());
            out.set_column(j, &self.solve_vec(&col));
        }
        out
    }
}

fn sym_swap(m: &mut DMat, a: usize, b: usize) {
    if a == b {
        return;
    }
    m.swap_rows(a, b);
    m.swap_columns(a, b);
}

/// Jacobi-preconditioned conjugate gradient for symmetric positive definite
/// H x = b. Convergence is measured by the relative residual ||r|| / ||b||;
/// a residual that stops improving above the target is reported as a stall.
pub fn cg_solve(h: &DMat, b: &DVec, rel_tol: f64) -> Result<DVec, LinalgError> {
    let n = h.nrows();
    assert_eq!(h.ncols(), n);
    assert_eq!(b.len(), n);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(DVec::zeros(n));
    }

    let inv_diag = DVec::from_fn(n, |i, _| {
        let d = h[(i, i)];
        if d.abs() > 0.0 {
            1.0 / d
        } else {
            1.0
        }
    });

    let mut x = DVec::zeros(n);
    let mut r = b.clone();
    let mut z = r.component_mul(&inv_diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);

    let max_iters = 20 * n + 50;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for _ in 0..max_iters {
        let res = r.norm() / b_norm;
        if res <= rel_tol {
            return Ok(x);
        }
        if res < best * (1.0 - 1e-12) {
            best = res;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 60 {
                return Err(LinalgError::CgStalled { residual: res, target: rel_tol });
            }
        }

        let hp = h * &p;
        let denom = p.dot(&hp);
        if denom <= 0.0 {
            // Not positive definite along p; surface as a stall.
            return Err(LinalgError::CgStalled { residual: res, target: rel_tol });
        }
        let alpha = rz / denom;
        x += alpha * &p;
        r -= alpha * &hp;
        z = r.component_mul(&inv_diag);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }

    let res = r.norm() / b_norm;
    if res <= rel_tol {
        Ok(x)
    } else {
        Err(LinalgError::CgStalled { residual: res, target: rel_tol })
    }
}
