//! Desk-scale episodic few-shot segmentation stack with two plug-in modules:
//! a train-time low-level feature perturbation (random convolution plus
//! Fourier amplitude/phase recombination) and a test-time score-map
//! calibration driven by low-level query features. Ships with a synthetic
//! multi-domain episode generator and diagnostic instruments (sharpness
//! probe, linear CKA, per-epoch mIoU curves).
//!
//! All numeric code is generic over the scalar type ([`Scalar`], f32 or f64).
//! The shipped pipeline runs in f32 (checkpoints store f32); verification
//! suites instantiate the same code at f64.

pub mod data;
pub mod model;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub(crate) mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{bilinear_resize, conv2d, cosine, fft2, ifft2_real};
pub use tensor::{ComplexSpectrum, ConvKernel, FeatureMap, Mask};

/// Scalar type of the shipped pipeline.
pub type Real = f32;

pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
