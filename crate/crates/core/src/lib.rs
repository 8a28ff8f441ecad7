//! Deformable 3D registration with a weight-sharing feature pyramid,
//! feature-enhanced residual decoding layers and a dual-stage
//! threshold-controlled iteration policy.
//!
//! The crate is `no_std` (with `alloc`): it holds the numerical core only.
//! File formats, checkpoints, reports and the command line live in the
//! companion `tcip` crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;

mod error;
pub mod autodiff;
pub mod encoder;
pub mod ferm;
pub mod kernels;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tci;
pub mod tensor;
pub mod volume;
pub mod warpfield;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{AdamConfig, ParamStore};
pub use tensor::{Shape5, Tensor5};
pub use volume::{LabelVolume, Volume};
pub use warpfield::DeformationField;

/// Negative-side slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;
