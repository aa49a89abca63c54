//! Built-in problem instances.

pub mod example1;
pub mod qp;
pub mod svm;

pub use example1::{make_example1, Example1};
pub use qp::{make_bilevel_qp, QpProblem, QpReference};
pub use svm::{make_hyperclean_toy, make_svm_hyperopt, Dataset, Kernel, SvmDual, SvmError, SvmPrimal};
