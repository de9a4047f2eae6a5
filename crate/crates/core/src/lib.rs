//! Fully conditional Glow: a dual-stack normalizing flow for paired
//! image-to-image translation with exact likelihoods.

pub mod autodiff;
pub mod cond;
pub mod data;
pub mod error;
pub mod flow;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
