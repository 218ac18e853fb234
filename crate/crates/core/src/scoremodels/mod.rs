//! Score models `s(z_t, t | c) ≈ ∇ log p_t(z_t | c)`.
//!
//! Analytic Gaussian-mixture scores serve as ground truth; [`MlpScore`] is a
//! small network trained by denoising score matching; [`LinearScore`] is an
//! affine score with a known constant Jacobian used by tests and spectral
//! checks.

mod gaussian;
mod linear;
mod mlp;
pub mod scenes;

pub use gaussian::GaussianMixtureScore;
pub use linear::LinearScore;
pub use mlp::{dsm_train, dsm_train_labeled, DsmConfig, MlpScore};

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Discrete stand-in for a text prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Condition {
    pub label: Option<usize>,
}

impl Condition {
    pub fn none() -> Self {
        Self { label: None }
    }

    pub fn label(k: usize) -> Self {
        Self { label: Some(k) }
    }
}

/// A score network together with its Jacobian products.
///
/// `t` ranges over `0..=T`; at `t = 0` the score is that of the data law.
pub trait ScoreModel: Send + Sync {
    /// Shape of `z_t`.
    fn shape(&self) -> &[usize];

    fn schedule(&self) -> &NoiseSchedule;

    fn score(&self, z: &Tensor, t: usize, c: &Condition) -> Result<Tensor>;

    /// `J_s(z)·v`, the Jacobian taken with respect to `z`.
    fn score_jvp(&self, z: &Tensor, t: usize, c: &Condition, v: &Tensor) -> Result<Tensor>;

    /// `J_s(z)ᵀ·w`.
    fn score_vjp(&self, z: &Tensor, t: usize, c: &Condition, w: &Tensor) -> Result<Tensor>;

    /// `(s(z), J_s(z)·v)`; models may share work between the two.
    fn score_and_jvp(
        &self,
        z: &Tensor,
        t: usize,
        c: &Condition,
        v: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        Ok((self.score(z, t, c)?, self.score_jvp(z, t, c, v)?))
    }

    /// Exact `log p_0(z0)` when the data law is known.
    fn data_log_density(&self, _z0: &Tensor) -> Option<f64> {
        None
    }

    fn describe(&self) -> String;
}

pub(crate) fn check_input(model: &dyn ScoreModel, z: &Tensor, t: usize, op: &str) -> Result<()> {
    if z.shape() != model.shape() {
        return Err(crate::Error::shape(op, model.shape(), z.shape()));
    }
    model.schedule().check_level(t)
}
