//! Iterative distributed computing (IDC) estimation of multinomial logistic
//! regression with many choices.
//!
//! The multinomial log-likelihood is rewritten, through per-observation fixed
//! effects, as a Poisson quasi-likelihood that separates across choices. The
//! estimator alternates a closed-form update of the fixed effects with one
//! independent Poisson regression per choice, run in parallel.

pub mod constrained;
pub mod error;
pub mod exec;
pub mod glm;
pub mod idc;
pub mod inference;
pub mod init;
pub mod io;
pub mod mle;
pub mod model;
pub mod sim;

pub use error::{IdmrError, Result};
