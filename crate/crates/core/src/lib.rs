pub mod autodiff;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod optim;
pub mod pretrain;
pub mod random;
pub mod rewards;
pub mod rl;
pub mod schedule;
pub mod synthworld;

pub use error::{Error, Result};
