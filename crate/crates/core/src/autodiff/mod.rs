//! Minimal tensor arithmetic with reverse-mode differentiation and Adam.

mod adam;
pub mod kernels;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{
    channel_mix_forward, conv2d_forward, dense_forward, squeeze_tensor, unsqueeze_tensor, Gradients, Tape, Var,
};
