//! Super-resolution root/soil segmentation of 3D MRI volumes.
//!
//! The crate covers the whole pipeline: procedural training data
//! ([`synth`]), a valid-convolution 3D U-Net that predicts at twice the input
//! resolution ([`net`]) on top of a small reverse-mode engine ([`autodiff`]),
//! training ([`train`]), tiled full-volume inference ([`infer`]) and
//! distance-tolerant evaluation ([`metrics`]).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use volume::{Axis, Dtype, Normalization, Volume, VoxelBox};
