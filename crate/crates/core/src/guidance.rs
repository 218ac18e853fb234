//! Training-free guidance: energies evaluated on the posterior mean, the
//! adversarial perturbation, Jacobian-vector-product guidance, and two
//! baselines (plain energy-gradient guidance and an MPGD-style clean-space
//! step).
//!
//! Every mode is expressed as an effective score `s − γ·d` for some direction
//! `d`, so the reverse step stays a plain DDIM update.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::diffkernel::{DifferentiableFn, FnBuilder};
use crate::error::{Error, Result};
use crate::sampler::{ddim_coefficient, ddim_step, posterior_mean_from_score};
use crate::scoremodels::{Condition, ScoreModel};
use crate::tensor::Tensor;
use crate::victim::{adv_loss_fn, Mask, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    /// `d = ∇_{z_t} h(z_{0|t})`.
    EnergyDps,
    /// Gradient step on the clean estimate, then DDIM with the model's noise.
    Mpgd,
    /// `d = J_s(z_t)·∇_{z_t} h(z_{0|t})`.
    Jvpg,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [
        GuidanceMode::None,
        GuidanceMode::EnergyDps,
        GuidanceMode::Mpgd,
        GuidanceMode::Jvpg,
    ];
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::None => "none",
            GuidanceMode::EnergyDps => "energy_dps",
            GuidanceMode::Mpgd => "mpgd",
            GuidanceMode::Jvpg => "jvpg",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "energy_dps" | "dps" => Ok(GuidanceMode::EnergyDps),
            "mpgd" => Ok(GuidanceMode::Mpgd),
            "jvpg" => Ok(GuidanceMode::Jvpg),
            other => Err(Error::parse("guidance mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GammaSchedule {
    #[default]
    Constant,
    /// `γ_t = γ·‖s‖/‖d‖`.
    NormMatched,
}

impl fmt::Display for GammaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaSchedule::Constant => "constant",
            GammaSchedule::NormMatched => "norm_matched",
        })
    }
}

impl FromStr for GammaSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(GammaSchedule::Constant),
            "norm_matched" => Ok(GammaSchedule::NormMatched),
            other => Err(Error::parse("gamma schedule", format!("unknown schedule `{other}`"))),
        }
    }
}

/// Where the score Jacobian is evaluated in JVP guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Linearization {
    /// At `z_t`.
    #[default]
    Current,
    /// At `z_t + δ`.
    Shifted,
}

impl fmt::Display for Linearization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linearization::Current => "current",
            Linearization::Shifted => "shifted",
        })
    }
}

impl FromStr for Linearization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(Linearization::Current),
            "shifted" => Ok(Linearization::Shifted),
            other => Err(Error::parse("linearization", format!("unknown point `{other}`"))),
        }
    }
}

/// Scalar energy `h(z0)` on clean-space tensors.
#[derive(Clone, Debug)]
pub struct EnergyFunction {
    f: DifferentiableFn,
    name: String,
}

impl EnergyFunction {
    pub fn new(f: DifferentiableFn, name: impl Into<String>) -> Result<Self> {
        if f.input_shapes().len() != 1 || !f.is_scalar() {
            return Err(Error::invalid(
                "an energy must be a scalar function of one tensor",
            ));
        }
        Ok(Self { f, name: name.into() })
    }

    /// `½‖z0 − target‖²`.
    pub fn quadratic(target: Tensor) -> Self {
        let mut b = FnBuilder::new();
        let z = b.input(target.shape());
        let c = b.constant(target);
        let d = b.sub(z, c).expect("same shape");
        let sq = b.sum_squares(d);
        let h = b.scale(sq, 0.5);
        Self::new(b.build(h).expect("quadratic graph"), "quadratic").expect("scalar")
    }

    pub fn constant(shape: &[usize], value: f64) -> Self {
        let mut b = FnBuilder::new();
        let _z = b.input(shape);
        let c = b.constant(Tensor::scalar(value));
        Self::new(b.build(c).expect("constant graph"), "constant").expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.f.input_shapes()[0]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, z0: &Tensor) -> Result<f64> {
        self.f.evaluate(&[z0])?.item()
    }

    pub fn value_and_grad(&self, z0: &Tensor) -> Result<(f64, Tensor)> {
        self.f.value_and_grad(z0)
    }
}

/// `h(z_{0|t})` and its gradients with respect to `z0` and `z_t`.
#[derive(Clone, Debug)]
pub struct EnergyGradient {
    pub value: f64,
    pub score: Tensor,
    pub posterior_mean: Tensor,
    pub grad_z0: Tensor,
    pub grad_zt: Tensor,
}

fn energy_gradient_with_score(
    energy: &EnergyFunction,
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
    score: Tensor,
) -> Result<EnergyGradient> {
    let sched = model.schedule();
    let z0 = posterior_mean_from_score(z, t, &score, sched)?;
    let (value, g0) = energy.value_and_grad(&z0)?;
    // ∂z0/∂z_t = (I + (1−ᾱ)·J_s) / √ᾱ, J_s taken transposed.
    let ab = sched.alpha_bar(t);
    let jt = model.score_vjp(z, t, c, &g0)?;
    let inv = 1.0 / ab.sqrt();
    let grad = g0.zip_map(&jt, "energy gradient", |a, b| (a + (1.0 - ab) * b) * inv)?;
    if !grad.is_finite() || !value.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            what: format!("energy gradient (energy = {value})"),
            prefix: Vec::new(),
        });
    }
    Ok(EnergyGradient {
        value,
        score,
        posterior_mean: z0,
        grad_z0: g0,
        grad_zt: grad,
    })
}

/// Gradient of `z_t ↦ h(z_{0|t})`, differentiating through the score model.
pub fn energy_gradient(
    energy: &EnergyFunction,
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
) -> Result<EnergyGradient> {
    let s = model.score(z, t, c)?;
    energy_gradient_with_score(energy, z, t, model, c, s)
}

/// `‖f(z0') ⊙ M_T − λ·f(x) ⊙ M_T‖²` as an energy on clean candidates, where
/// `z0'` is the candidate composited into `x` when an attacker region is set.
#[derive(Clone, Debug)]
pub struct AdversarialEnergy {
    victim: Arc<VictimModel>,
    x: Tensor,
    target: Mask,
    adversarial: Option<Mask>,
    lambda: f64,
    reference: Tensor,
    energy: EnergyFunction,
}

impl AdversarialEnergy {
    pub fn new(
        victim: Arc<VictimModel>,
        x: Tensor,
        target: Mask,
        adversarial: Option<Mask>,
        lambda: f64,
    ) -> Result<Self> {
        let (f, reference) = adv_loss_fn(&victim, &x, &target, adversarial.as_ref(), lambda)?;
        Ok(Self {
            energy: EnergyFunction::new(f, "adversarial")?,
            victim,
            x,
            target,
            adversarial,
            lambda,
            reference,
        })
    }

    fn rebuild(&mut self) -> Result<()> {
        *self = Self::new(
            Arc::clone(&self.victim),
            self.x.clone(),
            self.target.clone(),
            self.adversarial.clone(),
            self.lambda,
        )?;
        Ok(())
    }

    pub fn set_image(&mut self, x: Tensor) -> Result<()> {
        self.x = x;
        self.rebuild()
    }

    pub fn set_target(&mut self, target: Mask) -> Result<()> {
        self.target = target;
        self.rebuild()
    }

    pub fn set_adversarial(&mut self, adversarial: Option<Mask>) -> Result<()> {
        self.adversarial = adversarial;
        self.rebuild()
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        self.lambda = lambda;
        self.rebuild()
    }

    pub fn energy(&self) -> &EnergyFunction {
        &self.energy
    }

    /// `f(x) ⊙ M_T`.
    pub fn reference_depth(&self) -> &Tensor {
        &self.reference
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn victim(&self) -> &VictimModel {
        &self.victim
    }

    pub fn loss(&self, z0: &Tensor) -> Result<f64> {
        self.energy.value(z0)
    }
}

/// `δ = ∇_{z_t} L_adv(z_{0|t})`.
pub fn adv_delta(
    adv: &AdversarialEnergy,
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
) -> Result<Tensor> {
    Ok(energy_gradient(adv.energy(), z, t, model, c)?.grad_zt)
}

/// `J_s(z_t)·δ`.
pub fn jvpg_direction(model: &dyn ScoreModel, z: &Tensor, t: usize, c: &Condition, delta: &Tensor) -> Result<Tensor> {
    model.score_jvp(z, t, c, delta)
}

/// Outcome of one (possibly guided) reverse step.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub next: Tensor,
    pub score: Tensor,
    pub effective_score: Tensor,
    pub posterior_mean: Tensor,
    pub energy: Option<f64>,
    pub guidance_norm: f64,
    pub delta_norm: Option<f64>,
    pub jdelta_norm: Option<f64>,
    pub gamma: f64,
}

impl GuidedStep {
    pub(crate) fn unguided(
        model: &dyn ScoreModel,
        z: &Tensor,
        t: usize,
        c: &Condition,
        eps: &Tensor,
    ) -> Result<Self> {
        let sched = model.schedule();
        let s = model.score(z, t, c)?;
        let z0 = posterior_mean_from_score(z, t, &s, sched)?;
        let next = ddim_step(z, t, &s, eps, sched)?;
        Ok(Self {
            next,
            effective_score: s.clone(),
            score: s,
            posterior_mean: z0,
            energy: None,
            guidance_norm: 0.0,
            delta_norm: None,
            jdelta_norm: None,
            gamma: 0.0,
        })
    }
}

/// Guidance mode, energy and strength. `gamma` may be negative; its sign
/// decides whether the energy is pushed up or down.
#[derive(Clone, Debug)]
pub struct GuidanceHook {
    pub mode: GuidanceMode,
    pub energy: EnergyFunction,
    pub gamma: f64,
    pub gamma_schedule: GammaSchedule,
    pub linearization: Linearization,
}

impl GuidanceHook {
    pub fn new(mode: GuidanceMode, energy: EnergyFunction, gamma: f64) -> Self {
        Self {
            mode,
            energy,
            gamma,
            gamma_schedule: GammaSchedule::Constant,
            linearization: Linearization::Current,
        }
    }

    pub fn with_gamma_schedule(mut self, schedule: GammaSchedule) -> Self {
        self.gamma_schedule = schedule;
        self
    }

    pub fn with_linearization(mut self, point: Linearization) -> Self {
        self.linearization = point;
        self
    }

    pub(crate) fn validate(&self, model: &dyn ScoreModel) -> Result<()> {
        if self.energy.shape() != model.shape() {
            return Err(Error::shape("guidance energy", model.shape(), self.energy.shape()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite, got {}", self.gamma)));
        }
        Ok(())
    }

    fn effective_gamma(&self, score: &Tensor, direction: &Tensor) -> f64 {
        match self.gamma_schedule {
            GammaSchedule::Constant => self.gamma,
            GammaSchedule::NormMatched => {
                let dn = direction.norm();
                if dn > 0.0 {
                    self.gamma * score.norm() / dn
                } else {
                    self.gamma
                }
            }
        }
    }

    /// One reverse step `t → t−1` with noise `eps`.
    pub fn step(
        &self,
        model: &dyn ScoreModel,
        z: &Tensor,
        t: usize,
        c: &Condition,
        eps: &Tensor,
    ) -> Result<GuidedStep> {
        let sched = model.schedule();
        sched.check_step(t)?;
        if self.mode == GuidanceMode::None || self.gamma == 0.0 {
            let mut out = GuidedStep::unguided(model, z, t, c, eps)?;
            out.energy = Some(self.energy.value(&out.posterior_mean)?);
            return Ok(out);
        }
        let s = model.score(z, t, c)?;
        let (direction, eg, delta_norm, jdelta_norm) = match self.mode {
            GuidanceMode::None => unreachable!(),
            GuidanceMode::EnergyDps => {
                let eg = energy_gradient_with_score(&self.energy, z, t, model, c, s.clone())?;
                (eg.grad_zt.clone(), eg, None, None)
            }
            GuidanceMode::Jvpg => {
                let eg = energy_gradient_with_score(&self.energy, z, t, model, c, s.clone())?;
                let delta = &eg.grad_zt;
                let jd = match self.linearization {
                    Linearization::Current => jvpg_direction(model, z, t, c, delta)?,
                    Linearization::Shifted => jvpg_direction(model, &z.add(delta)?, t, c, delta)?,
                };
                let (dn, jn) = (delta.norm(), jd.norm());
                (jd, eg, Some(dn), Some(jn))
            }
            GuidanceMode::Mpgd => {
                let z0 = posterior_mean_from_score(z, t, &s, sched)?;
                let (value, g0) = self.energy.value_and_grad(&z0)?;
                if !g0.is_finite() || !value.is_finite() {
                    return Err(Error::NonFinite {
                        step: t,
                        what: format!("energy gradient (energy = {value})"),
                        prefix: Vec::new(),
                    });
                }
                // Score-space equivalent of the clean-space step.
                let k = sched.alpha_bar(t - 1).sqrt() / ddim_coefficient(t, sched)?;
                let eg = EnergyGradient {
                    value,
                    score: s.clone(),
                    posterior_mean: z0,
                    grad_zt: g0.scale(k),
                    grad_z0: g0,
                };
                (eg.grad_zt.clone(), eg, None, None)
            }
        };
        let gamma = self.effective_gamma(&s, &direction);
        let effective = s.axpy(-gamma, &direction)?;
        let next = if self.mode == GuidanceMode::Mpgd {
            // z0' = z0 − γ∇h; re-noise with the model-implied ε̂, then step.
            let shift = sched.alpha_bar(t).sqrt() * gamma;
            let z_prime = z.axpy(-shift, &eg.grad_z0)?;
            ddim_step(&z_prime, t, &s, eps, sched)?
        } else {
            ddim_step(z, t, &effective, eps, sched)?
        };
        Ok(GuidedStep {
            next,
            guidance_norm: gamma.abs() * direction.norm(),
            effective_score: effective,
            score: s,
            posterior_mean: eg.posterior_mean,
            energy: Some(eg.value),
            delta_norm,
            jdelta_norm,
            gamma,
        })
    }
}

/// One JVP-guided reverse step.
#[allow(clippy::too_many_arguments)]
pub fn jvpg_step(
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
    energy: &EnergyFunction,
    gamma: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    GuidanceHook::new(GuidanceMode::Jvpg, energy.clone(), gamma)
        .step(model, z, t, c, eps)
        .map(|s| s.next)
}

/// One step guided by the raw energy gradient.
pub fn baseline_dps_step(
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
    energy: &EnergyFunction,
    gamma: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    GuidanceHook::new(GuidanceMode::EnergyDps, energy.clone(), gamma)
        .step(model, z, t, c, eps)
        .map(|s| s.next)
}

/// One MPGD-style step: gradient step on `z_{0|t}`, re-noise, DDIM.
pub fn baseline_mpgd_step(
    z: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    c: &Condition,
    energy: &EnergyFunction,
    gamma: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    GuidanceHook::new(GuidanceMode::Mpgd, energy.clone(), gamma)
        .step(model, z, t, c, eps)
        .map(|s| s.next)
}
