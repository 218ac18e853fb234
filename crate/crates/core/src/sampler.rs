//! Deterministic-capable DDIM reverse sampling with optional guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceHook, GuidedStep};
use crate::schedule::{noise_to_level, NoiseSchedule};
use crate::scoremodels::{Condition, ScoreModel};
use crate::tensor::Tensor;
use crate::victim::Mask;

/// Multiplier of the score in one reverse step:
/// `(1−ᾱ_t)/√α_t − √(1−ᾱ_{t−1}−σ_t²)·√(1−ᾱ_t)`.
pub fn ddim_coefficient(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    let (a, ab, ab_prev, sigma) = (
        sched.alpha(t),
        sched.alpha_bar(t),
        sched.alpha_bar(t - 1),
        sched.sigma(t),
    );
    let rest = 1.0 - ab_prev - sigma * sigma;
    if rest < 0.0 {
        return Err(Error::invalid(format!(
            "sigma_{t}^2 = {} exceeds 1 - alpha_bar_{} = {}",
            sigma * sigma,
            t - 1,
            1.0 - ab_prev
        )));
    }
    Ok((1.0 - ab) / a.sqrt() - rest.sqrt() * (1.0 - ab).sqrt())
}

/// `z_{t−1} = z_t/√α_t + σ_t·ε + C_t·score`.
pub fn ddim_step(z: &Tensor, t: usize, score: &Tensor, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    z.same_shape(score, "ddim_step score")?;
    z.same_shape(eps, "ddim_step noise")?;
    let coef = ddim_coefficient(t, sched)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let sigma = sched.sigma(t);
    let out = z
        .data()
        .iter()
        .zip(score.data())
        .zip(eps.data())
        .map(|((zi, si), ei)| zi * inv + sigma * ei + coef * si)
        .collect();
    Tensor::new(z.shape(), out)
}

/// Tweedie estimate `(z_t + (1−ᾱ_t)·s) / √ᾱ_t` from a precomputed score.
pub fn posterior_mean_from_score(z: &Tensor, t: usize, score: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(t)?;
    let ab = sched.alpha_bar(t);
    if !(ab > 0.0) {
        return Err(Error::invalid(format!("alpha_bar_{t} is zero")));
    }
    let (c, inv) = (1.0 - ab, 1.0 / ab.sqrt());
    z.zip_map(score, "posterior_mean", |zi, si| (zi + c * si) * inv)
}

pub fn posterior_mean(z: &Tensor, t: usize, model: &dyn ScoreModel, c: &Condition) -> Result<Tensor> {
    let s = model.score(z, t, c)?;
    posterior_mean_from_score(z, t, &s, model.schedule())
}

/// Pixels outside `mask` are pinned to the forward-noised `image` after every
/// step.
#[derive(Clone, Debug)]
pub struct KnownRegion {
    pub image: Tensor,
    /// Free region; everything else is overwritten.
    pub mask: Mask,
}

#[derive(Clone, Debug, Default)]
pub struct SamplerConfig {
    pub seed: u64,
    pub mask_reproject: bool,
    pub known: Option<KnownRegion>,
}

impl SamplerConfig {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Diagnostics for one reverse step `t → t−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub energy: Option<f64>,
    pub state_norm: f64,
    /// `‖γ_t·d‖` where `d` is the guidance direction.
    pub guidance_norm: f64,
    pub delta_norm: Option<f64>,
    pub jdelta_norm: Option<f64>,
    pub gamma: f64,
}

/// `states[i]` is `z_{T−i}`; per-step vectors are indexed the same way for
/// `t = T..1`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub posterior_means: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub effective_scores: Vec<Tensor>,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn energies(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.energy).collect()
    }
}

/// A reverse process that can be advanced one step at a time, so that callers
/// may inspect or perturb intermediate states.
pub struct Sampler<'a> {
    model: &'a dyn ScoreModel,
    cond: Condition,
    cfg: &'a SamplerConfig,
    guidance: Option<&'a GuidanceHook>,
    rng: ChaCha8Rng,
    t: usize,
    traj: Trajectory,
    /// Known region broadcast to the image shape (1 = free).
    free: Option<Tensor>,
}

impl<'a> Sampler<'a> {
    /// Draws `z_T ~ N(0, I)` from `cfg.seed`.
    pub fn new(
        model: &'a dyn ScoreModel,
        cond: Condition,
        cfg: &'a SamplerConfig,
        guidance: Option<&'a GuidanceHook>,
    ) -> Result<Self> {
        let free = match (&cfg.known, cfg.mask_reproject) {
            (Some(k), true) => {
                k.image.same_shape(&Tensor::zeros(model.shape()), "known image")?;
                let c = model.shape()[0];
                let b = k.mask.broadcast(c);
                b.same_shape(&k.image, "known mask")?;
                Some(b)
            }
            (None, true) => {
                return Err(Error::invalid("mask_reproject needs a known image and mask"));
            }
            _ => None,
        };
        if let Some(g) = guidance {
            g.validate(model)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let t = model.schedule().steps();
        let z_t = Tensor::randn(model.shape(), &mut rng);
        Ok(Self {
            model,
            cond,
            cfg,
            guidance,
            rng,
            t,
            traj: Trajectory {
                states: vec![z_t],
                posterior_means: Vec::with_capacity(t),
                scores: Vec::with_capacity(t),
                effective_scores: Vec::with_capacity(t),
                records: Vec::with_capacity(t),
            },
            free,
        })
    }

    /// Current step index; `0` once finished.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> &Tensor {
        self.traj.terminal()
    }

    pub fn condition(&self) -> &Condition {
        &self.cond
    }

    /// Adds `delta` to the current state in place.
    pub fn perturb(&mut self, delta: &Tensor) -> Result<()> {
        let z = self.traj.states.last_mut().expect("nonempty");
        z.add_assign(delta)
    }

    fn fail(&self, step: usize, what: String) -> Error {
        Error::NonFinite {
            step,
            what,
            prefix: self.traj.states.clone(),
        }
    }

    pub fn step(&mut self) -> Result<()> {
        let t = self.t;
        if t == 0 {
            return Err(Error::invalid("sampler already reached t = 0"));
        }
        let sched = self.model.schedule();
        let z = self.state().clone();
        let eps = Tensor::randn(z.shape(), &mut self.rng);
        let out = match self.guidance {
            Some(g) => g.step(self.model, &z, t, &self.cond, &eps)?,
            None => GuidedStep::unguided(self.model, &z, t, &self.cond, &eps)?,
        };
        let mut next = out.next;
        if let (Some(free), Some(known)) = (&self.free, &self.cfg.known) {
            let fresh = if t - 1 > 0 {
                Tensor::randn(z.shape(), &mut self.rng)
            } else {
                Tensor::zeros(z.shape())
            };
            let noised = noise_to_level(&known.image, t - 1, &fresh, sched)?;
            for ((v, n), m) in next.data_mut().iter_mut().zip(noised.data()).zip(free.data()) {
                if *m == 0.0 {
                    *v = *n;
                }
            }
        }
        if !next.is_finite() {
            return Err(self.fail(t, "state".into()));
        }
        if let Some(e) = out.energy {
            if !e.is_finite() {
                return Err(self.fail(t, format!("energy {e}")));
            }
        }
        self.traj.records.push(StepRecord {
            t,
            energy: out.energy,
            state_norm: z.norm(),
            guidance_norm: out.guidance_norm,
            delta_norm: out.delta_norm,
            jdelta_norm: out.jdelta_norm,
            gamma: out.gamma,
        });
        self.traj.posterior_means.push(out.posterior_mean);
        self.traj.scores.push(out.score);
        self.traj.effective_scores.push(out.effective_score);
        self.traj.states.push(next);
        self.t -= 1;
        Ok(())
    }

    /// Steps until the current index equals `t_stop`.
    pub fn run_to(&mut self, t_stop: usize) -> Result<()> {
        while self.t > t_stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Trajectory> {
        self.run_to(0)?;
        Ok(self.traj)
    }
}

/// Full reverse trajectory `z_T → z_0`.
pub fn sample(
    model: &dyn ScoreModel,
    c: &Condition,
    cfg: &SamplerConfig,
    guidance: Option<&GuidanceHook>,
) -> Result<Trajectory> {
    Sampler::new(model, *c, cfg, guidance)?.finish()
}
