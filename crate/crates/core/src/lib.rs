//! Mixed finite element discretisation of periodic Hamilton-Jacobi-Bellman
//! cell problems under the Cordes condition, with a posteriori estimates and
//! an effective-problem solver for periodic homogenisation.

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod effective;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fem;
pub mod homogenization;
pub mod mesh;
pub mod mixed;
pub mod quadrature;
pub mod sparse;

pub use error::{Error, Result};
