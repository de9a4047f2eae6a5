//! Unconditional invertible building blocks. Each layer has a recorded
//! forward pass (used for training) and an exact closed-form inverse.

pub mod actnorm;
pub mod coupling;
pub mod invconv;
pub mod multiscale;

pub use actnorm::{actnorm_apply, actnorm_data_init, ActnormParams};
pub use coupling::{coupling_apply, CouplingParams};
pub use invconv::{invconv_apply, random_rotation, InvConvParams};
pub use multiscale::{gaussian_logp, split_prior_forward, split_prior_inverse, squeeze, LatentPyramid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}
