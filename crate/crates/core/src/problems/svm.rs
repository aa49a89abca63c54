//! SVM hyperparameter optimization: the upper level tunes one penalty
//! exponent c_i per training point, the lower level trains the classifier.
//!
//! Linear kernels train in the primal over y = (w, b, xi):
//!
//! ```text
//!     min 1/2||w||^2 + 1/2 mu_b b^2 + 1/2 sum_i e^{c_i} xi_i^2
//!     s.t. 1 - xi_i - l_i (w.z_i + b) <= 0
//! ```
//!
//! Kernelized (polynomial) instances train in the dual over y = alpha:
//!
//! ```text
//!     min 1/2 alpha'(Q + C^-1)alpha - 1'alpha,   Q_ij = l_i l_j K(z_i, z_j)
//!     s.t. alpha >= 0,  l'alpha = 0,             C^-1 = diag(e^{-c_i})
//! ```
//!
//! Both are quadratic in y at fixed c with affine constraints, so the whole
//! QP tooling (crossover polish, exact sensitivities) applies. The upper
//! objective is a smooth surrogate of validation error: per validation point,
//! sigma(-l (w.z + b)/||w||) with sigma(t) = (1 - e^-t)/(1 + e^-t); the norm
//! is floored at 1e-12 since the surrogate is undefined at w = 0.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::problem::{min_eigenvalue, BilevelProblem, DMat, DVec, ProblemError};

pub const W_NORM_FLOOR: f64 = 1e-12;
pub const DEFAULT_MU_B: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("kernel Gram matrix fails the positive-semidefinite spot check (min eigenvalue {min_eig:.3e})")]
    DegenerateKernel { min_eig: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Polynomial { gamma: f64, r: f64, degree: u32 },
}

impl Kernel {
    pub fn eval(&self, a: &DVec, b: &DVec) -> f64 {
        match *self {
            Kernel::Linear => a.dot(b),
            Kernel::Polynomial { gamma, r, degree } => (gamma * a.dot(b) + r).powi(degree as i32),
        }
    }
}

/// Labeled points; labels are exactly +1 or -1.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub points: Vec<DVec>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// CSV with a header row; the column named `label` holds values in
    /// {-1, 1} and every other column is a numeric feature.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, ProblemError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| ProblemError::Invalid(format!("csv header: {e}")))?
            .clone();
        let label_col = headers
            .iter()
            .position(|h| h == "label")
            .ok_or_else(|| ProblemError::Invalid("csv needs a `label` column".into()))?;
        let mut out = Dataset::default();
        for (row_idx, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| ProblemError::Invalid(format!("csv row {row_idx}: {e}")))?;
            let mut feats = Vec::with_capacity(record.len().saturating_sub(1));
            let mut label = None;
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| ProblemError::Invalid(format!("csv row {row_idx}: non-numeric `{field}`")))?;
                if col == label_col {
                    label = Some(v);
                } else {
                    feats.push(v);
                }
            }
            let label = label.unwrap();
            if label != 1.0 && label != -1.0 {
                return Err(ProblemError::Invalid(format!("csv row {row_idx}: label must be -1 or 1, got {label}")));
            }
            out.points.push(DVec::from_vec(feats));
            out.labels.push(label);
        }
        if out.points.is_empty() {
            return Err(ProblemError::Invalid("csv has no data rows".into()));
        }
        let d = out.points[0].len();
        if out.points.iter().any(|p| p.len() != d) {
            return Err(ProblemError::Invalid("csv rows have inconsistent widths".into()));
        }
        Ok(out)
    }

    /// Two spherical Gaussian clusters with centers +-margin/sqrt(dim) per
    /// coordinate, alternating labels.
    pub fn synthetic_two_gaussians(count: usize, dim: usize, margin: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let shift = margin / (dim as f64).sqrt();
        let mut out = Dataset::default();
        for i in 0..count {
            let label = if i % 2 == 0 { 1.0 } else { -1.0 };
            let center = label * shift;
            out.points.push(DVec::from_fn(dim, |_, _| center + 0.5 * normal()));
            out.labels.push(label);
        }
        out
    }

    /// Flips a fraction of labels in place; returns the affected indices,
    /// ascending. Deterministic per seed.
    pub fn flip_labels(&mut self, fraction: f64, seed: u64) -> Vec<usize> {
        let k = ((self.len() as f64) * fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        let mut flipped: Vec<usize> = idx.into_iter().take(k).collect();
        flipped.sort_unstable();
        for &i in &flipped {
            self.labels[i] = -self.labels[i];
        }
        flipped
    }
}

fn sigma(t: f64) -> f64 {
    // (1 - e^-t)/(1 + e^-t) = tanh(t/2), written to avoid overflow.
    (0.5 * t).tanh()
}

fn sigma_prime(t: f64) -> f64 {
    let s = sigma(t);
    0.5 * (1.0 - s * s)
}

/// Primal path (linear kernel). Lower variables y = (w, b, xi); upper
/// variables x = c, one exponent per training point.
#[derive(Debug, Clone)]
pub struct SvmPrimal {
    pub train: Dataset,
    pub val: Dataset,
    pub mu_b: f64,
}

impl SvmPrimal {
    pub fn new(train: Dataset, val: Dataset, mu_b: f64) -> Result<Self, SvmError> {
        if train.is_empty() || val.is_empty() {
            return Err(ProblemError::Invalid("train and validation sets must be nonempty".into()).into());
        }
        if mu_b <= 0.0 {
            return Err(ProblemError::Invalid("mu_b must be positive".into()).into());
        }
        Ok(Self { train, val, mu_b })
    }

    fn dim(&self) -> usize {
        self.train.dim()
    }

    fn split<'a>(&self, y: &'a DVec) -> (nalgebra::DVectorView<'a, f64>, f64, nalgebra::DVectorView<'a, f64>) {
        let d = self.dim();
        (y.rows(0, d), y[d], y.rows(d + 1, self.train.len()))
    }

    /// Signed decision value w.z + b for a trained y.
    pub fn decision(&self, y: &DVec, z: &DVec) -> f64 {
        let (w, b, _) = self.split(y);
        w.dot(z) + b
    }

    /// Fraction of a dataset classified correctly by the trained y.
    pub fn accuracy(&self, y: &DVec, data: &Dataset) -> f64 {
        let hits = data
            .points
            .iter()
            .zip(&data.labels)
            .filter(|(z, &l)| self.decision(y, z) * l > 0.0)
            .count();
        hits as f64 / data.len() as f64
    }
}

impl BilevelProblem for SvmPrimal {
    fn d_x(&self) -> usize {
        self.train.len()
    }
    fn d_y(&self) -> usize {
        self.dim() + 1 + self.train.len()
    }
    fn m(&self) -> usize {
        self.train.len()
    }
    /// Strong-convexity floor; exact value is min(1, mu_b, min_i e^{c_i}),
    /// so this holds whenever every c_i >= ln(mu_b).
    fn mu(&self) -> f64 {
        self.mu_b.min(1.0)
    }
    fn is_qp(&self) -> bool {
        true
    }

    fn f(&self, _x: &DVec, y: &DVec) -> f64 {
        let (w, b, _) = self.split(y);
        let den = w.norm().max(W_NORM_FLOOR);
        self.val
            .points
            .iter()
            .zip(&self.val.labels)
            .map(|(z, &l)| sigma(-l * (w.dot(z) + b) / den))
            .sum()
    }

    fn grad_x_f(&self, _x: &DVec, _y: &DVec) -> DVec {
        DVec::zeros(self.d_x())
    }

    fn grad_y_f(&self, _x: &DVec, y: &DVec) -> DVec {
        let d = self.dim();
        let (w, b, _) = self.split(y);
        let nw = w.norm();
        let den = nw.max(W_NORM_FLOOR);
        let mut grad = DVec::zeros(self.d_y());
        for (z, &l) in self.val.points.iter().zip(&self.val.labels) {
            let h = w.dot(z) + b;
            let u = -l * h / den;
            let s = sigma_prime(u);
            // du/dw = -l z / den + l h w / den^3 (norm term only off the floor)
            for a in 0..d {
                let mut dw = -l * z[a] / den;
                if nw > W_NORM_FLOOR {
                    dw += l * h * w[a] / (den * den * den);
                }
                grad[a] += s * dw;
            }
            grad[d] += s * (-l / den);
        }
        grad
    }

    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        let (w, b, xi) = self.split(y);
        let penalty: f64 = (0..self.train.len()).map(|i| x[i].exp() * xi[i] * xi[i]).sum();
        0.5 * w.norm_squared() + 0.5 * self.mu_b * b * b + 0.5 * penalty
    }

    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        let d = self.dim();
        let (w, b, xi) = self.split(y);
        let mut grad = DVec::zeros(self.d_y());
        for a in 0..d {
            grad[a] = w[a];
        }
        grad[d] = self.mu_b * b;
        for i in 0..self.train.len() {
            grad[d + 1 + i] = x[i].exp() * xi[i];
        }
        grad
    }

    fn hess_yy_g(&self, x: &DVec, _y: &DVec) -> DMat {
        let d = self.dim();
        let mut h = DMat::zeros(self.d_y(), self.d_y());
        for a in 0..d {
            h[(a, a)] = 1.0;
        }
        h[(d, d)] = self.mu_b;
        for i in 0..self.train.len() {
            h[(d + 1 + i, d + 1 + i)] = x[i].exp();
        }
        h
    }

    fn hess_xy_g(&self, x: &DVec, y: &DVec) -> DMat {
        let d = self.dim();
        let (_, _, xi) = self.split(y);
        let mut h = DMat::zeros(self.d_y(), self.d_x());
        for i in 0..self.train.len() {
            h[(d + 1 + i, i)] = x[i].exp() * xi[i];
        }
        h
    }

    fn p(&self, _x: &DVec, y: &DVec) -> DVec {
        let (w, b, xi) = self.split(y);
        DVec::from_fn(self.train.len(), |i, _| {
            1.0 - xi[i] - self.train.labels[i] * (w.dot(&self.train.points[i]) + b)
        })
    }

    fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        let d = self.dim();
        let mut jac = DMat::zeros(self.train.len(), self.d_y());
        for i in 0..self.train.len() {
            let l = self.train.labels[i];
            for a in 0..d {
                jac[(i, a)] = -l * self.train.points[i][a];
            }
            jac[(i, d)] = -l;
            jac[(i, d + 1 + i)] = -1.0;
        }
        jac
    }

    fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::zeros(self.m(), self.d_x())
    }
}

/// Dual path (any PSD kernel). Lower variables y = alpha.
#[derive(Debug, Clone)]
pub struct SvmDual {
    pub train: Dataset,
    pub val: Dataset,
    pub kernel: Kernel,
    pub mu_b: f64,
    /// Q_ij = l_i l_j K(z_i, z_j), fixed at construction.
    q: DMat,
}

impl SvmDual {
    pub fn new(train: Dataset, val: Dataset, kernel: Kernel, mu_b: f64) -> Result<Self, SvmError> {
        if train.is_empty() || val.is_empty() {
            return Err(ProblemError::Invalid("train and validation sets must be nonempty".into()).into());
        }
        let nt = train.len();
        let q = DMat::from_fn(nt, nt, |i, j| {
            train.labels[i] * train.labels[j] * kernel.eval(&train.points[i], &train.points[j])
        });
        let min_eig = min_eigenvalue(&q);
        if min_eig < -1e-8 * (1.0 + q.amax()) {
            return Err(SvmError::DegenerateKernel { min_eig });
        }
        Ok(Self { train, val, kernel, mu_b, q })
    }

    /// Bias recovered from the strongest support vector i* = argmax alpha:
    /// b = l_{i*}(1 - e^{-c_{i*}} alpha_{i*}) - sum_j alpha_j l_j K(z_j, z_{i*}).
    fn bias_anchor(&self, alpha: &DVec) -> usize {
        let mut best = 0;
        for i in 1..alpha.len() {
            if alpha[i] > alpha[best] {
                best = i;
            }
        }
        best
    }

    fn bias(&self, c: &DVec, alpha: &DVec, anchor: usize) -> f64 {
        let i = anchor;
        let k_i: f64 = (0..alpha.len())
            .map(|j| alpha[j] * self.train.labels[j] * self.kernel.eval(&self.train.points[j], &self.train.points[i]))
            .sum();
        self.train.labels[i] * (1.0 - (-c[i]).exp() * alpha[i]) - k_i
    }

    /// Kernelized decision value for a point z.
    pub fn decision(&self, c: &DVec, alpha: &DVec, z: &DVec) -> f64 {
        let anchor = self.bias_anchor(alpha);
        let b = self.bias(c, alpha, anchor);
        (0..alpha.len())
            .map(|j| alpha[j] * self.train.labels[j] * self.kernel.eval(&self.train.points[j], z))
            .sum::<f64>()
            + b
    }

    pub fn accuracy(&self, c: &DVec, alpha: &DVec, data: &Dataset) -> f64 {
        let hits = data
            .points
            .iter()
            .zip(&data.labels)
            .filter(|(z, &l)| self.decision(c, alpha, z) * l > 0.0)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Margin norm in feature space: ||w||_H = sqrt(alpha' Q alpha).
    fn w_norm(&self, alpha: &DVec) -> f64 {
        (&self.q * alpha).dot(alpha).max(0.0).sqrt()
    }
}

impl BilevelProblem for SvmDual {
    fn d_x(&self) -> usize {
        self.train.len()
    }
    fn d_y(&self) -> usize {
        self.train.len()
    }
    fn m(&self) -> usize {
        self.train.len()
    }
    fn n(&self) -> usize {
        1
    }
    /// Conservative floor; the true modulus is min eig(Q) + min_i e^{-c_i}.
    fn mu(&self) -> f64 {
        1e-8
    }
    fn is_qp(&self) -> bool {
        true
    }

    fn f(&self, x: &DVec, y: &DVec) -> f64 {
        let anchor = self.bias_anchor(y);
        let b = self.bias(x, y, anchor);
        let den = self.w_norm(y).max(W_NORM_FLOOR);
        self.val
            .points
            .iter()
            .zip(&self.val.labels)
            .map(|(z, &l)| {
                let h: f64 = (0..y.len())
                    .map(|j| y[j] * self.train.labels[j] * self.kernel.eval(&self.train.points[j], z))
                    .sum::<f64>()
                    + b;
                sigma(-l * h / den)
            })
            .sum()
    }

    fn grad_x_f(&self, x: &DVec, y: &DVec) -> DVec {
        // c enters the upper loss only through the bias anchor term.
        let anchor = self.bias_anchor(y);
        let b = self.bias(x, y, anchor);
        let den = self.w_norm(y).max(W_NORM_FLOOR);
        let db_dc = self.train.labels[anchor] * (-x[anchor]).exp() * y[anchor];
        let mut total = 0.0;
        for (z, &l) in self.val.points.iter().zip(&self.val.labels) {
            let h: f64 = (0..y.len())
                .map(|j| y[j] * self.train.labels[j] * self.kernel.eval(&self.train.points[j], z))
                .sum::<f64>()
                + b;
            total += sigma_prime(-l * h / den) * (-l / den);
        }
        let mut grad = DVec::zeros(self.d_x());
        grad[anchor] = total * db_dc;
        grad
    }

    fn grad_y_f(&self, x: &DVec, y: &DVec) -> DVec {
        let nt = self.train.len();
        let anchor = self.bias_anchor(y);
        let b = self.bias(x, y, anchor);
        let nw = self.w_norm(y);
        let den = nw.max(W_NORM_FLOOR);
        let q_alpha = &self.q * y;

        // db/dalpha_k = -l_k K(z_k, z_anchor) - l_anchor e^{-c_anchor} [k = anchor]
        let mut db = DVec::from_fn(nt, |k, _| {
            -self.train.labels[k] * self.kernel.eval(&self.train.points[k], &self.train.points[anchor])
        });
        db[anchor] -= self.train.labels[anchor] * (-x[anchor]).exp();

        let mut grad = DVec::zeros(nt);
        for (z, &l) in self.val.points.iter().zip(&self.val.labels) {
            let h: f64 = (0..nt)
                .map(|j| y[j] * self.train.labels[j] * self.kernel.eval(&self.train.points[j], z))
                .sum::<f64>()
                + b;
            let u = -l * h / den;
            let s = sigma_prime(u);
            for k in 0..nt {
                let dh = self.train.labels[k] * self.kernel.eval(&self.train.points[k], z) + db[k];
                let mut du = -l * dh / den;
                if nw > W_NORM_FLOOR {
                    du += l * h * q_alpha[k] / (den * den * nw);
                }
                grad[k] += s * du;
            }
        }
        grad
    }

    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        let ci: f64 = (0..y.len()).map(|i| (-x[i]).exp() * y[i] * y[i]).sum();
        0.5 * ((&self.q * y).dot(y) + ci) - y.sum()
    }

    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        &self.q * y + DVec::from_fn(y.len(), |i, _| (-x[i]).exp() * y[i] - 1.0)
    }

    fn hess_yy_g(&self, x: &DVec, _y: &DVec) -> DMat {
        let mut h = self.q.clone();
        for i in 0..self.d_y() {
            h[(i, i)] += (-x[i]).exp();
        }
        h
    }

    fn hess_xy_g(&self, x: &DVec, y: &DVec) -> DMat {
        DMat::from_diagonal(&DVec::from_fn(self.d_y(), |i, _| -(-x[i]).exp() * y[i]))
    }

    fn p(&self, _x: &DVec, y: &DVec) -> DVec {
        -y.clone()
    }
    fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        -DMat::identity(self.m(), self.d_y())
    }
    fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::zeros(self.m(), self.d_x())
    }

    fn q(&self, _x: &DVec, y: &DVec) -> DVec {
        DVec::from_element(1, DVec::from_vec(self.train.labels.clone()).dot(y))
    }
    fn jac_y_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::from_fn(1, self.d_y(), |_, j| self.train.labels[j])
    }
    fn jac_x_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::zeros(1, self.d_x())
    }
}

/// Kernel dispatch: linear kernels train in the primal, polynomial kernels in
/// the dual (where the kernel only enters through the Gram matrix).
pub fn make_svm_hyperopt(
    train: Dataset,
    val: Dataset,
    kernel: Kernel,
    mu_b: f64,
) -> Result<Box<dyn BilevelProblem>, SvmError> {
    match kernel {
        Kernel::Linear => Ok(Box::new(SvmPrimal::new(train, val, mu_b)?)),
        Kernel::Polynomial { .. } => Ok(Box::new(SvmDual::new(train, val, kernel, mu_b)?)),
    }
}

/// Seeded hyper-cleaning toy: 20 training points with 40% of labels flipped,
/// 20 clean validation points. The class margin is wide relative to the
/// cluster noise, so flipped points sit deep inside the wrong class and the
/// only way to fit the validation set is to stop paying for their slack.
/// Returns the flipped training indices.
pub fn make_hyperclean_toy(seed: u64) -> (SvmPrimal, Vec<usize>) {
    let mut train = Dataset::synthetic_two_gaussians(20, 2, 2.0, seed);
    let val = Dataset::synthetic_two_gaussians(20, 2, 2.0, seed.wrapping_add(1));
    let flipped = train.flip_labels(0.4, seed.wrapping_add(2));
    let prob = SvmPrimal::new(train, val, DEFAULT_MU_B).expect("toy datasets are valid");
    (prob, flipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower::{solve_lower, SolverOpts};
    use crate::problem::validate_problem;

    fn separable_four() -> (Dataset, Dataset) {
        let mk = |pts: &[(f64, f64, f64)]| Dataset {
            points: pts.iter().map(|&(a, b, _)| DVec::from_vec(vec![a, b])).collect(),
            labels: pts.iter().map(|&(_, _, l)| l).collect(),
        };
        let train = mk(&[(1.0, 1.0, 1.0), (1.5, 0.5, 1.0), (-1.0, -1.0, -1.0), (-0.5, -1.5, -1.0)]);
        let val = mk(&[(0.8, 1.2, 1.0), (-1.2, -0.8, -1.0)]);
        (train, val)
    }

    #[test]
    fn primal_derivative_callbacks_are_consistent() {
        let (train, val) = separable_four();
        let prob = SvmPrimal::new(train, val, DEFAULT_MU_B).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(DVec, DVec)> = (0..3)
            .map(|_| {
                (
                    DVec::from_fn(prob.d_x(), |_, _| rng.gen_range(-0.5..0.5)),
                    DVec::from_fn(prob.d_y(), |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let report = validate_problem(&prob, &pts);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dual_derivative_callbacks_are_consistent() {
        let (train, val) = separable_four();
        let prob = SvmDual::new(train, val, Kernel::Polynomial { gamma: 1.0, r: 1.0, degree: 3 }, DEFAULT_MU_B).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Positive alpha with a clear argmax so the bias anchor is stable
        // under the finite-difference probes.
        let pts: Vec<(DVec, DVec)> = (0..3)
            .map(|_| {
                let mut alpha = DVec::from_fn(prob.d_y(), |_, _| rng.gen_range(0.2..0.6));
                alpha[0] = 2.0;
                (DVec::from_fn(prob.d_x(), |_, _| rng.gen_range(-0.5..0.5)), alpha)
            })
            .collect();
        let report = validate_problem(&prob, &pts);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn separable_data_trains_clean() {
        let (train, val) = separable_four();
        let prob = SvmPrimal::new(train.clone(), val, DEFAULT_MU_B).unwrap();
        let c = DVec::zeros(prob.d_x());
        let sol = solve_lower(&prob, &c, None, &SolverOpts::default()).unwrap();
        assert!((prob.accuracy(&sol.y_star, &train) - 1.0).abs() < 1e-12, "training error 0");
        let d = prob.train.dim();
        let xi = sol.y_star.rows(d + 1, prob.train.len());
        assert!(xi.amax() < 0.6, "slacks stay small on separable data: {xi:?}");
    }

    #[test]
    fn dual_polynomial_training_hits_kkt_tolerance() {
        let mk = |pts: &[(f64, f64, f64)]| Dataset {
            points: pts.iter().map(|&(a, b, _)| DVec::from_vec(vec![a, b])).collect(),
            labels: pts.iter().map(|&(_, _, l)| l).collect(),
        };
        let train = mk(&[(1.0, 0.2, 1.0), (0.4, 1.1, 1.0), (-0.9, -0.7, -1.0)]);
        let val = mk(&[(0.9, 0.4, 1.0), (-1.0, -0.5, -1.0)]);
        let prob = SvmDual::new(train, val, Kernel::Polynomial { gamma: 1.0, r: 1.0, degree: 3 }, DEFAULT_MU_B).unwrap();
        let c = DVec::zeros(3);
        let sol = solve_lower(&prob, &c, None, &SolverOpts::default()).unwrap();
        assert!(sol.kkt_residual <= 1e-9, "residual {}", sol.kkt_residual);
        assert!(sol.converged);
        // Dual feasibility: alpha >= 0 and l'alpha = 0.
        assert!(sol.y_star.min() >= 0.0);
        assert!(prob.q(&c, &sol.y_star)[0].abs() <= 1e-9);
    }

    #[test]
    fn primal_and_dual_optima_agree_under_vanishing_bias_penalty() {
        // The dual drops the bias regularizer, so the duality gap is
        // 1/2 mu_b b*^2; shrink mu_b until it is far below the tolerance.
        let (train, val) = separable_four();
        let mu_b = 1e-8;
        let primal = SvmPrimal::new(train.clone(), val.clone(), mu_b).unwrap();
        let dual = SvmDual::new(train, val, Kernel::Linear, mu_b).unwrap();
        let c = DVec::zeros(4);
        let opts = SolverOpts::default();
        let ps = solve_lower(&primal, &c, None, &opts).unwrap();
        let ds = solve_lower(&dual, &c, None, &opts).unwrap();
        let p_val = primal.g(&c, &ps.y_star);
        let d_val = dual.g(&c, &ds.y_star);
        assert!((p_val + d_val).abs() < 1e-6, "primal {p_val} vs dual {d_val}");
    }

    #[test]
    fn indefinite_kernel_is_rejected() {
        let pts = Dataset {
            points: vec![
                DVec::from_vec(vec![1.0, 0.0]),
                DVec::from_vec(vec![0.0, 1.0]),
                DVec::from_vec(vec![1.0, 1.0]),
            ],
            labels: vec![1.0, -1.0, 1.0],
        };
        let val = Dataset {
            points: vec![DVec::from_vec(vec![0.5, 0.5])],
            labels: vec![1.0],
        };
        match SvmDual::new(pts, val, Kernel::Polynomial { gamma: 1.0, r: -5.0, degree: 2 }, DEFAULT_MU_B) {
            Err(SvmError::DegenerateKernel { min_eig }) => assert!(min_eig < 0.0),
            other => panic!("expected DegenerateKernel, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn csv_ingestion_round_trips() {
        let text = "a,label,b\n0.5,1,-0.25\n-1.5,-1,2.0\n";
        let ds = Dataset::from_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels, vec![1.0, -1.0]);
        assert_eq!(ds.points[0], DVec::from_vec(vec![0.5, -0.25]));

        assert!(Dataset::from_csv("a,b\n1,2\n".as_bytes()).is_err(), "missing label column");
        assert!(Dataset::from_csv("a,label\n1,0.5\n".as_bytes()).is_err(), "bad label value");
        assert!(Dataset::from_csv("a,label\n".as_bytes()).is_err(), "no rows");
    }

    #[test]
    fn label_flipping_is_seeded_and_exact() {
        let mut a = Dataset::synthetic_two_gaussians(20, 2, 1.0, 3);
        let before = a.labels.clone();
        let fa = a.flip_labels(0.4, 9);
        assert_eq!(fa.len(), 8);
        for (i, l) in a.labels.iter().enumerate() {
            if fa.contains(&i) {
                assert_eq!(*l, -before[i]);
            } else {
                assert_eq!(*l, before[i]);
            }
        }
        let mut b = Dataset::synthetic_two_gaussians(20, 2, 1.0, 3);
        let fb = b.flip_labels(0.4, 9);
        assert_eq!(fa, fb, "same seed, same flips");
    }

    #[test]
    fn hyperclean_toy_shape() {
        let (prob, flipped) = make_hyperclean_toy(7);
        assert_eq!(prob.d_x(), 20);
        assert_eq!(flipped.len(), 8);
        assert!(flipped.iter().all(|&i| i < 20));
    }
}
