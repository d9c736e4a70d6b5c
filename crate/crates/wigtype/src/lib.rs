//! Deterministic machinery and Monte Carlo harness for Wigner-type random matrices.
//!
//! The crate solves the quadratic vector equation `-1/m_i(z) = z + (S m(z))_i`
//! for a variance profile `S`, extracts the density of states and its
//! quantiles, analyses the stability operator, evaluates the variance and
//! expectation functionals of linear spectral statistics, and samples the
//! corresponding matrix ensembles.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod freeconv;
pub mod io;
pub mod lss;
pub mod profile;
pub mod quad;
pub mod qve;
pub mod spectrum;
pub mod stability;
pub mod testfn;

pub use error::{Error, Result};
pub use profile::VarianceProfile;
pub use qve::{QveSolution, SolverOptions};
pub use spectrum::SpectralData;
pub use testfn::TestFunction;
