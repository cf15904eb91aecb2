//! Gaussian-mixture transform coding (GMTC) for correlated high-dimensional
//! vectors such as wideband massive-MIMO channel state information.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense Hermitian linear algebra, Jacobi eigensolver, seeded sampling.
//! * [`synth`]: geometry-induced covariances and synthetic mixture datasets.
//! * [`fit`]: EM estimation of zero-mean mixtures and the shared KLT dictionary.
//! * [`rd`]: reverse waterfilling over pooled spectra and the rate–distortion bounds.
//! * [`entropy`]: 32-bit range coder with categorical and discretized-Gaussian models.
//! * [`codec`]: MAP state selection, component-matched KLT, ECSQ, reconstruction.
//! * [`formats`]: the CSIBIN / GMTD / GMTB binary containers.
//! * [`experiment`]: RD sweeps and reports shared by the CLI and the acceptance suite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod formats;
pub mod rd;
pub mod synth;
pub mod tensor;

pub use error::{GmtcError, Result};
pub use num_complex::Complex64;
