//! Core library for zero-resource discovery of speech units: feature
//! preprocessing, Dirichlet process Gaussian mixture clustering of frames,
//! label post-processing into segments, segment clustering, bottleneck
//! network training and the evaluation suite used to score the outputs.

pub mod dpgmm;
pub mod error;
pub mod eval;
pub mod features;
pub mod labeling;
pub mod linalg;
pub mod mtlnet;
pub mod rng;
pub mod segclust;
pub mod segmentation;
pub mod syncorpus;

pub use error::{Error, Result};
