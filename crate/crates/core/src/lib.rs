//! Bilevel optimization by gradient approximation.
//!
//! Minimizes Phi(x) = f(x, y*(x)) where y*(x) solves a parametric convex
//! program with inequality and equality constraints. The solution map y*(x)
//! is piecewise smooth: wherever strict complementarity holds it is
//! differentiated implicitly through the KKT system, and at the nonsmooth
//! seams (active constraints with zero multipliers) the descent direction is
//! the minimum-norm element of a finite set of representative gradients, one
//! per smooth piece meeting a ball around the current iterate.
//!
//! Module map:
//! - [`problem`]: the [`BilevelProblem`](problem::BilevelProblem) callback
//!   bundle, Lagrangian Hessians, validation, finite-difference adaptor.
//! - [`lower`]: primal-dual interior-point solver for the lower level with
//!   warm starting and active-set classification.
//! - [`sensitivity`]: implicit KKT differentiation, directional derivatives,
//!   representative gradients, saddle-point solves (dense and CG).
//! - [`clarke`]: ball differentiability check, representative-gradient set,
//!   minimum-norm element.
//! - [`gam`]: the outer descent loop, line search, trace output.
//! - [`problems`]: built-in instances (analytic 1-D example, random bilevel
//!   QPs, SVM hyperparameter tuning, data hyper-cleaning).
//! - [`oracle`]: independent verification machinery used by the tests and the
//!   CLI `verify` subcommand.

pub mod clarke;
pub mod gam;
pub mod linalg;
pub mod lower;
pub mod oracle;
pub mod problem;
pub mod sensitivity;
pub mod problems;

pub use problem::{BilevelProblem, DMat, DVec};
