//! Empirical-Bayes calibration and deconvolution for images blurred by a
//! parametric kernel family with unknown parameters and unknown noise level.

pub mod error;
pub mod fft;
pub mod image;
pub mod io;
pub mod kernels;
pub mod map;
pub mod experiment;
pub mod params;
pub mod prior;
pub mod sampler;
pub mod sapg;

pub use error::{Error, Result};
pub use image::{Decibels, ImageGrid};
pub use kernels::{BlurModel, BlurOperator, KernelFamily};
pub use params::{HyperDomain, HyperParams, Interval};
