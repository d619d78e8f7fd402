//! Build checkpoint: partial module set.
pub mod costs;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod gaussian;
pub mod geom;
pub mod rng;

pub use error::{Error, Result};
