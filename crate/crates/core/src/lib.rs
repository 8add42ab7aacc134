pub mod autodiff;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub mod manifold;
pub mod optimizer;

pub use error::{Error, Result};
