//! Learned quarter-pel interpolation filters for block motion compensation.
//!
//! A bias-free, activation-free three layer CNN ([`ScratchModel`]) is trained
//! per fractional position and QP with an L1 (SAD) loss and Adam. Because the
//! network is linear end to end it collapses into a single 13x13 filter
//! ([`CollapsedFilter`]) that reproduces the network residual exactly. The
//! [`harness`] module compares those filters against the standard separable
//! 8/7-tap luma filters in a switchable block-based motion compensation loop.

pub mod container;
pub mod error;
pub mod harness;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod stdfilt;
pub mod synth;
pub mod trainer;
pub mod yuv;

pub use error::{Error, Result};
pub use harness::{simulate, BlockDecision, FilterChoice, HarnessConfig, MotionVector, SimulationReport};
pub use interpret::{collapse, CollapsedFilter, FilterSet, FixedFilter};
pub use metrics::{bd_rate, psnr, RdPoint};
pub use model::{Architecture, FractionalPosition, ModelBank, ScratchModel};
pub use numerics::{crop_center, full_conv, valid_xcorr, Kernel, Plane};
pub use stdfilt::{interp_std, std_coeffs, TapFilter};
pub use trainer::{train, AdamState, Gradients, TrainConfig, TrainingRecord};
pub use yuv::YuvSequence;
