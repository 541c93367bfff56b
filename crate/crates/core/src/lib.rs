//! Forgery-aware audio-visual deepfake detection with variational Bayes.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and 2-D DFTs,
//! * [`frontend`]: STFT, log-mel features and patch tokenization,
//! * [`conv`]: difference convolutions and the spectral high-pass branch,
//! * [`glfa`]: the adapter that turns those features into attention offsets,
//! * [`vbfe`]: Gaussian latent estimation, divergences and the factorized ELBO,
//! * [`model`]: the frozen two-stream backbone with adapters attached,
//! * [`data`], [`train`], [`metrics`]: synthetic data, optimization and scoring.
//!
//! Numerical kernels are generic over [`Scalar`]; the model itself runs at `f64`
//! through the aliases below.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod conv;
pub mod error;
pub mod frontend;
pub mod glfa;
pub mod metrics;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vbfe;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit tensor, the precision everything trainable uses.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Var<'t> = tensor::Var<'t, f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type ComplexGrid = tensor::ComplexGrid<f64>;
