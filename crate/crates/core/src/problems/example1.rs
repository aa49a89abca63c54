//! One-dimensional bilevel instance with a closed-form solution.
//!
//! ```text
//!     min_x   y*(x)
//!     s.t.    y*(x) = argmin_y { (y - x^2)^2 : -x - y <= 0 }
//! ```
//!
//! The unconstrained inner minimizer y = x^2 satisfies the constraint
//! (y >= -x) exactly when x(x + 1) >= 0, so
//!
//! ```text
//!     y*(x) = x^2        for x <= -1 or x >= 0
//!     y*(x) = -x         for -1 <= x <= 0       (constraint active)
//!     lambda(x) = -2x(1 + x) on [-1, 0], zero elsewhere
//! ```
//!
//! Phi(x) = y*(x) is nonsmooth at x = -1 and x = 0, where the active set
//! changes and the multiplier degenerates to zero. Those two kinks make this
//! the standard smoke test for every sensitivity and subdifferential routine
//! in the crate.

use crate::problem::{BilevelProblem, DMat, DVec};

#[derive(Debug, Clone, Copy, Default)]
pub struct Example1;

pub fn make_example1() -> Example1 {
    Example1
}

impl Example1 {
    /// Closed-form lower-level solution.
    pub fn y_star_exact(x: f64) -> f64 {
        if (-1.0..=0.0).contains(&x) {
            -x
        } else {
            x * x
        }
    }

    /// Closed-form multiplier of the single inequality.
    pub fn lambda_exact(x: f64) -> f64 {
        if (-1.0..=0.0).contains(&x) {
            -2.0 * x * (1.0 + x)
        } else {
            0.0
        }
    }

    pub fn phi_exact(x: f64) -> f64 {
        Self::y_star_exact(x)
    }

    /// Derivative of Phi where it exists; None at the kinks x = -1 and x = 0.
    pub fn grad_phi_exact(x: f64) -> Option<f64> {
        if x == -1.0 || x == 0.0 {
            None
        } else if (-1.0..0.0).contains(&x) {
            Some(-1.0)
        } else {
            Some(2.0 * x)
        }
    }
}

impl BilevelProblem for Example1 {
    fn d_x(&self) -> usize {
        1
    }
    fn d_y(&self) -> usize {
        1
    }
    fn m(&self) -> usize {
        1
    }
    fn mu(&self) -> f64 {
        2.0
    }
    fn is_qp(&self) -> bool {
        true
    }

    fn f(&self, _x: &DVec, y: &DVec) -> f64 {
        y[0]
    }
    fn grad_x_f(&self, _x: &DVec, _y: &DVec) -> DVec {
        DVec::zeros(1)
    }
    fn grad_y_f(&self, _x: &DVec, _y: &DVec) -> DVec {
        DVec::from_element(1, 1.0)
    }

    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        (y[0] - x[0] * x[0]).powi(2)
    }
    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        DVec::from_element(1, 2.0 * (y[0] - x[0] * x[0]))
    }
    fn hess_yy_g(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::from_element(1, 1, 2.0)
    }
    fn hess_xy_g(&self, x: &DVec, _y: &DVec) -> DMat {
        DMat::from_element(1, 1, -4.0 * x[0])
    }

    fn p(&self, x: &DVec, y: &DVec) -> DVec {
        DVec::from_element(1, -x[0] - y[0])
    }
    fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::from_element(1, 1, -1.0)
    }
    fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        DMat::from_element(1, 1, -1.0)
    }
}
