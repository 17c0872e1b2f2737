//! Curvature-guided LoRA initialization.
//!
//! The pipeline captures per-layer signals from a small feed-forward
//! [`model`], builds Kronecker curvature factors in [`curvature`], whitens the
//! loss gradient in [`whitening`] and produces the adapter pair in [`init`].
//! [`oracle`] holds dense ground-truth routines used to check the pipeline.

pub mod error;
pub mod linalg;

pub use error::{Error, Result};
pub mod model;
pub mod random;
pub mod curvature;
pub mod whitening;
pub mod init;
pub mod oracle;
pub mod io;
pub mod harness;
