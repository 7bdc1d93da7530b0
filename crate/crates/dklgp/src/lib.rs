//! Scalable variational inference for latent Gaussian process models.
//!
//! The approach combines two KL-optimal sparse-inverse-Cholesky (SIC)
//! approximations: a forward-KL-optimal factor for the GP prior and a
//! reverse-KL-optimal SIC-structured Gaussian variational posterior, trained
//! by minibatch stochastic gradient ascent on the ELBO. Sparsity comes from a
//! reverse-maximin ordering with nearest-neighbor conditioning sets, and the
//! ELBO is made cheap by restricting triangular solves to (reduced) ancestor
//! sets of the underlying DAG.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod par;
pub mod predict;
pub mod vi;

pub use error::{Error, Result};
