//! Reduction of coupled monotone operator systems and a 1D
//! Cahn-Hilliard / elasticity discretization built on it.

// `!(x > 0.0)` is deliberate: it rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod monotone;
pub mod space;
pub mod instances;
pub mod reduction;
pub mod evolution;
pub mod model;
