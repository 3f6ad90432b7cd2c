//! Reduced-order modeling toolkit for spectral element discretizations.

// Keep the LAPACK backend linked even in builds that only exercise
// BLAS-backed ndarray kernels.
use ndarray_linalg as _;

pub mod archive;
pub mod cli;
pub mod config;
pub mod dg;
pub mod element;
pub mod error;
pub mod expr;
pub mod field;
pub mod mesh;

pub mod oseen;
pub mod pod;
pub mod rom;
pub mod stab;

pub use error::{Error, Result};
