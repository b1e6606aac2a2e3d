//! Gaussian-mixture surrogates for diffusion-generated data, an EDM sampler
//! with an exact mixture denoiser, linear classifiers, spectral diagnostics
//! and concentration checks.

pub mod dataset;
pub mod concentration;
pub mod error;
pub mod experiments;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod mixtures;
pub mod sampler;
pub mod seed;
pub mod spectra;

pub use dataset::{LabeledDataset, Provenance};
pub use error::{Error, Result};
