//! Multi-resolution deep dictionary learning.
//!
//! A small convolutional feature extractor produces descriptor maps at three
//! spatial resolutions. Each active resolution gets its own residual encoding
//! layer ([`encoding`]); the per-level encodings are projected to a shared
//! width and mixed with learned weights that live on the probability simplex
//! ([`fusion`]). Every gradient in the crate is derived by hand and checked
//! against central finite differences ([`optim::gradcheck`]).

pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod fusion;
pub mod numkernel;
pub mod optim;
pub mod texdata;

pub use error::{Error, FormatError, Result};
