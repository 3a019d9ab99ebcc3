//! Deformable 2-D image registration trained with layer-wise gradient surgery.
//!
//! A registration network predicts a dense displacement field from a
//! fixed/moving image pair. Instead of minimising `L_sim + λ·L_reg`, each
//! parameter group follows the similarity gradient, projected off the
//! regularisation gradient whenever the two disagree. The crate carries
//! everything needed to exercise that idea end to end: grids and warping,
//! a small reverse-mode tape, the U-Net, both losses, the gradient
//! strategies with Adam, evaluation metrics, a synthetic cardiac-like
//! benchmark, file formats and the experiment driver used by the `gsreg`
//! binary.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod surgery;
pub mod synth;

pub use error::{Error, Result};
