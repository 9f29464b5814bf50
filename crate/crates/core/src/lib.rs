//! Physics-constrained neural PDE solving with low-rank factored networks.
//!
//! The crate bundles finite-difference reference solvers ([`fdm`]), Gaussian
//! random-field sampling ([`randfield`]), differentiable discretized residuals
//! ([`msr`]), the factored network architecture ([`lordnet`]) and a dilated
//! CNN comparator ([`cnn`]), together with training ([`train`]), evaluation
//! ([`eval`]), on-disk formats ([`io`]) and scripted experiment presets
//! ([`experiments`]). All arithmetic is 64-bit.

pub mod checks;
pub mod cnn;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fdm;
pub mod field;
pub mod io;
pub mod lordnet;
pub mod model;
pub mod msr;
pub mod pipeline;
pub mod randfield;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::Field;
