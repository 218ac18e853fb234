//! Training-free adversarial object generation against toy monocular depth
//! estimators: guided diffusion sampling, salient region selection, and
//! Jacobian spectral analysis, all checkable against analytic references.

pub mod cli;
pub mod diffkernel;
pub mod error;
pub mod guidance;
pub mod io;
pub mod pipeline;
pub mod saliency;
pub mod sampler;
pub mod schedule;
pub mod scoremodels;
pub mod spectra;
pub mod tensor;
pub mod victim;

pub use error::{Error, Result};
pub use tensor::Tensor;
