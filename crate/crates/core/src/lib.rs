//! Split variational autoencoders on a small reverse-mode autodiff engine,
//! with latent mixture resampling and Fréchet scoring.

pub mod data;
pub mod error;
pub mod fid;
pub mod harness;
pub mod latent;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
