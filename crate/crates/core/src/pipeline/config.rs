//! Attack configuration and its flat `key = value` text form.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::{GammaSchedule, GuidanceMode, Linearization};
use crate::io::parse_key_values;
use crate::saliency::SrsConfig;
use crate::schedule::{
    NoiseSchedule, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_COSINE_PARAMS, DEFAULT_STEPS,
};
use crate::scoremodels::scenes::TEMPLATE_VARIANCE;
use crate::victim::VictimKind;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub eta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            steps: DEFAULT_STEPS,
            eta: 0.0,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let params = match self.kind {
            ScheduleKind::LinearBeta => (self.beta_start, self.beta_end),
            ScheduleKind::Cosine => DEFAULT_COSINE_PARAMS,
        };
        NoiseSchedule::build(self.kind, self.steps, self.eta, params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreModelSpec {
    /// Analytic mixture over the scene templates.
    Templates,
    /// Trained network loaded from a directory written by `MlpScore::save`.
    Mlp(PathBuf),
}

impl fmt::Display for ScoreModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreModelSpec::Templates => f.write_str("templates"),
            ScoreModelSpec::Mlp(p) => write!(f, "mlp:{}", p.display()),
        }
    }
}

impl FromStr for ScoreModelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "templates" => Ok(ScoreModelSpec::Templates),
            Some(("mlp", dir)) if !dir.is_empty() => Ok(ScoreModelSpec::Mlp(PathBuf::from(dir))),
            _ => Err(Error::parse("score model", format!("expected `templates` or `mlp:<dir>`, got `{s}`"))),
        }
    }
}

/// Procedural scenes with planted victims.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub scenes: usize,
    pub side: usize,
    pub seed: u64,
    pub scene_noise: f64,
    pub victim_kind: VictimKind,
    pub planted_gain: f64,
    pub planted_damp: f64,
    /// Weight of the global image mean in every depth pixel.
    pub context_gain: f64,
    pub target_side: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            scenes: 100,
            side: 16,
            seed: 0,
            scene_noise: 0.02,
            victim_kind: VictimKind::PatchPool,
            planted_gain: 4.0,
            planted_damp: 0.02,
            context_gain: 4.0,
            target_side: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub ensemble: EnsembleSpec,
    /// Scene index for single-scene runs.
    pub scene: usize,
    pub schedule: ScheduleSpec,
    pub score_model: ScoreModelSpec,
    pub template_variance: f64,
    /// Condition the generator on the scene class.
    pub condition_on_class: bool,
    pub srs: SrsConfig,
    pub mode: GuidanceMode,
    /// Non-negative strength; the sampler sign is chosen per mode so that
    /// every mode works toward the depth goal.
    pub gamma: f64,
    pub gamma_schedule: GammaSchedule,
    pub linearization: Linearization,
    pub lambda: f64,
    pub seed: u64,
    pub mask_reproject: bool,
    pub quantize_roundtrip: bool,
    /// Generate regions one at a time instead of jointly.
    pub sequential: bool,
    /// Clip generated objects to the pixel range.
    pub clip_object: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleSpec::default(),
            scene: 0,
            schedule: ScheduleSpec::default(),
            score_model: ScoreModelSpec::Templates,
            template_variance: TEMPLATE_VARIANCE,
            condition_on_class: true,
            srs: SrsConfig::default(),
            mode: GuidanceMode::Jvpg,
            gamma: 0.2,
            gamma_schedule: GammaSchedule::Constant,
            linearization: Linearization::Current,
            lambda: 2.0,
            seed: 0,
            mask_reproject: true,
            quantize_roundtrip: false,
            sequential: false,
            clip_object: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(format!("config key `{key}`"), format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::parse(format!("config key `{key}`"), format!("expected a boolean, got `{value}`"))),
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "scene",
    "scenes",
    "side",
    "ensemble_seed",
    "scene_noise",
    "victim_kind",
    "planted_gain",
    "planted_damp",
    "context_gain",
    "target_side",
    "schedule",
    "steps",
    "eta",
    "beta_start",
    "beta_end",
    "score_model",
    "template_variance",
    "condition_on_class",
    "mode",
    "gamma",
    "gamma_schedule",
    "linearization",
    "lambda",
    "k",
    "srs_iterations",
    "srs_step",
    "srs_clamp",
    "srs_side_factor",
    "mask_reproject",
    "quantize_roundtrip",
    "sequential",
    "clip_object",
];

impl AttackConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scene" => self.scene = parse(key, v)?,
            "scenes" => self.ensemble.scenes = parse(key, v)?,
            "side" => self.ensemble.side = parse(key, v)?,
            "ensemble_seed" => self.ensemble.seed = parse(key, v)?,
            "scene_noise" => self.ensemble.scene_noise = parse(key, v)?,
            "victim_kind" => self.ensemble.victim_kind = v.parse()?,
            "planted_gain" => self.ensemble.planted_gain = parse(key, v)?,
            "planted_damp" => self.ensemble.planted_damp = parse(key, v)?,
            "context_gain" => self.ensemble.context_gain = parse(key, v)?,
            "target_side" => self.ensemble.target_side = parse(key, v)?,
            "schedule" => self.schedule.kind = v.parse()?,
            "steps" => self.schedule.steps = parse(key, v)?,
            "eta" => self.schedule.eta = parse(key, v)?,
            "beta_start" => self.schedule.beta_start = parse(key, v)?,
            "beta_end" => self.schedule.beta_end = parse(key, v)?,
            "score_model" => self.score_model = v.parse()?,
            "template_variance" => self.template_variance = parse(key, v)?,
            "condition_on_class" => self.condition_on_class = parse_bool(key, v)?,
            "mode" => self.mode = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "gamma_schedule" => self.gamma_schedule = v.parse()?,
            "linearization" => self.linearization = v.parse()?,
            "lambda" => self.lambda = parse(key, v)?,
            "k" => self.srs.k = parse(key, v)?,
            "srs_iterations" => self.srs.iterations = parse(key, v)?,
            "srs_step" => self.srs.step = parse(key, v)?,
            "srs_clamp" => self.srs.clamp = if v == "none" { None } else { Some(parse(key, v)?) },
            "srs_side_factor" => self.srs.side_factor = parse(key, v)?,
            "mask_reproject" => self.mask_reproject = parse_bool(key, v)?,
            "quantize_roundtrip" => self.quantize_roundtrip = parse_bool(key, v)?,
            "sequential" => self.sequential = parse_bool(key, v)?,
            "clip_object" => self.clip_object = parse_bool(key, v)?,
            other => return Err(Error::parse("config", format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, context: &str) -> Result<()> {
        for (k, v) in parse_key_values(text, context)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.ensemble;
        Some(match key {
            "seed" => self.seed.to_string(),
            "scene" => self.scene.to_string(),
            "scenes" => e.scenes.to_string(),
            "side" => e.side.to_string(),
            "ensemble_seed" => e.seed.to_string(),
            "scene_noise" => e.scene_noise.to_string(),
            "victim_kind" => e.victim_kind.to_string(),
            "planted_gain" => e.planted_gain.to_string(),
            "planted_damp" => e.planted_damp.to_string(),
            "context_gain" => e.context_gain.to_string(),
            "target_side" => e.target_side.to_string(),
            "schedule" => self.schedule.kind.to_string(),
            "steps" => self.schedule.steps.to_string(),
            "eta" => self.schedule.eta.to_string(),
            "beta_start" => self.schedule.beta_start.to_string(),
            "beta_end" => self.schedule.beta_end.to_string(),
            "score_model" => self.score_model.to_string(),
            "template_variance" => self.template_variance.to_string(),
            "condition_on_class" => self.condition_on_class.to_string(),
            "mode" => self.mode.to_string(),
            "gamma" => self.gamma.to_string(),
            "gamma_schedule" => self.gamma_schedule.to_string(),
            "linearization" => self.linearization.to_string(),
            "lambda" => self.lambda.to_string(),
            "k" => self.srs.k.to_string(),
            "srs_iterations" => self.srs.iterations.to_string(),
            "srs_step" => self.srs.step.to_string(),
            "srs_clamp" => self.srs.clamp.map_or("none".into(), |c| c.to_string()),
            "srs_side_factor" => self.srs.side_factor.to_string(),
            "mask_reproject" => self.mask_reproject.to_string(),
            "quantize_roundtrip" => self.quantize_roundtrip.to_string(),
            "sequential" => self.sequential.to_string(),
            "clip_object" => self.clip_object.to_string(),
            _ => return None,
        })
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be a finite non-negative number, got {}", self.gamma)));
        }
        if !(self.template_variance > 0.0) {
            return Err(Error::invalid("template variance must be positive"));
        }
        let e = &self.ensemble;
        if e.scenes == 0 {
            return Err(Error::invalid("the ensemble needs at least one scene"));
        }
        if e.target_side == 0 || e.side % e.target_side != 0 || e.side / e.target_side < 2 {
            return Err(Error::invalid(format!(
                "target side {} must divide the scene side {} at least twice",
                e.target_side, e.side
            )));
        }
        if self.scene >= e.scenes {
            return Err(Error::invalid(format!("scene {} outside the {}-scene ensemble", self.scene, e.scenes)));
        }
        self.srs.validate()?;
        Ok(())
    }

    /// Signed strength passed to the sampler. Plain and clean-space gradient
    /// guidance descend the energy with a positive sign; Jacobian-modulated
    /// guidance flips it because the score Jacobian is negative definite.
    pub fn sampler_gamma(&self) -> f64 {
        sampler_gamma(self.mode, self.gamma)
    }
}

pub fn sampler_gamma(mode: GuidanceMode, gamma: f64) -> f64 {
    match mode {
        GuidanceMode::Jvpg => -gamma,
        _ => gamma,
    }
}
