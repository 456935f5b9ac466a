//! Model-based deep learning toolkit.
//!
//! The crate walks the spectrum from classical model-based optimization to
//! deep networks on one shared substrate:
//!
//! - [`tensor`]: dense `f64` tensors, factorizations, binary/CSV formats.
//! - [`autodiff`]: tape-based reverse-mode differentiation, enough to
//!   backpropagate through unrolled solvers and small networks.
//! - [`sparse`]: LASSO objectives with ISTA / FISTA / ADMM solvers.
//! - [`unfolded`]: deep unfolding (LISTA, unfolded ADMM) and learned solver
//!   hyperparameters.
//! - [`statespace`]: Kalman filtering, LQG and MPC control, the extended
//!   Kalman filter, learned noise covariances, and a learned Kalman gain.
//! - [`hybrid`]: plug-and-play ADMM with pluggable denoisers and deep-prior
//!   inversion over a generator.
//! - [`train`]: datasets, losses, SGD, and the reproducible experiment
//!   runner.
//! - [`suite`]: the end-to-end verification suite backing `mbdl suite`.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod hybrid;
pub mod oracle;
pub mod rng;
pub mod sparse;
pub mod statespace;
pub mod train;
pub mod unfolded;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
