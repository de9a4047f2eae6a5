//! The paired model: an unconditional source stack whose per-step
//! activations condition every step of the target stack.

pub mod config;
mod glow;
mod steps;
mod training;

pub use config::{ConditioningMode, ModelConfig};
pub use glow::{bits_per_dim, objective, ActivationCache, FlowPass, FullGlow, PairBatch, StepCache};
pub use steps::{
    CondTensors, Conditioning, PlainActnorm, PlainInvConv, SourceStep, StepLayout, StepVars, SubLayer, TargetActnorm,
    TargetInvConv, TargetStep,
};
pub use training::{GradientReport, MemoryStats};
