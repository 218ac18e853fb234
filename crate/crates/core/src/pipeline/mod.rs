//! End-to-end attack: select salient regions, generate adversarial content in
//! them with guided sampling, composite, and measure the target depth shift.

mod config;
mod report;

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{sampler_gamma, AttackConfig, EnsembleSpec, ScheduleSpec, ScoreModelSpec, CONFIG_KEYS};
pub use report::{write_comparison, write_ensemble};

use crate::error::{Error, Result};
use crate::guidance::{EnergyFunction, GuidanceHook, GuidanceMode};
use crate::saliency::{salient_regions, SaliencyResult};
use crate::sampler::{sample, KnownRegion, SamplerConfig, StepRecord};
use crate::scoremodels::scenes::{render_scene, template_mixture, NUM_CLASSES};
use crate::scoremodels::{Condition, MlpScore, ScoreModel};
use crate::tensor::Tensor;
use crate::victim::{
    compose_scene, depth_goal_fn, make_victim, masked_depth, mrsr, quantize_roundtrip, Mask, MaskRole, Planted,
    VictimModel, VictimSpec,
};

/// One ensemble member: scene, target box, and a victim whose target depth
/// is wired to one known patch.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub index: usize,
    pub class: usize,
    pub x: Tensor,
    pub target: Mask,
    pub victim: Arc<VictimModel>,
    pub planted_origin: (usize, usize),
}

pub fn toy_scene(spec: &EnsembleSpec, index: usize) -> Result<ToyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let cells = spec.side / spec.target_side;
    let ts = spec.target_side;
    let class = rng.random_range(0..NUM_CLASSES);
    // Targets sit in the lower half, where the ramp is the road surface.
    let target_cell = (rng.random_range(cells / 2..cells), rng.random_range(0..cells));
    let planted_cell = loop {
        let c = (rng.random_range(0..cells), rng.random_range(0..cells));
        if c != target_cell {
            break c;
        }
    };
    let victim_seed: u64 = rng.random();
    let x = render_scene(class, spec.side, spec.side, spec.scene_noise, &mut rng)?;
    let (ty, tx) = (target_cell.0 * ts, target_cell.1 * ts);
    let (py, px) = (planted_cell.0 * ts, planted_cell.1 * ts);
    let target = Mask::from_box(spec.side, spec.side, ty, tx, ts, ts, MaskRole::Target)?;
    let victim = make_victim(&VictimSpec {
        kind: spec.victim_kind,
        seed: victim_seed,
        height: spec.side,
        width: spec.side,
        context_gain: spec.context_gain,
        planted: Some(Planted {
            source: (py, px, ts),
            target: (ty, tx, ts, ts),
            gain: spec.planted_gain,
            damp: spec.planted_damp,
        }),
        ..VictimSpec::default()
    })?;
    Ok(ToyScene { index, class, x, target, victim: Arc::new(victim), planted_origin: (py, px) })
}

pub fn toy_ensemble(spec: &EnsembleSpec) -> Result<Vec<ToyScene>> {
    (0..spec.scenes).map(|i| toy_scene(spec, i)).collect()
}

pub fn build_score_model(cfg: &AttackConfig) -> Result<Box<dyn ScoreModel>> {
    let sched = cfg.schedule.build()?;
    let side = cfg.ensemble.side;
    Ok(match &cfg.score_model {
        config::ScoreModelSpec::Templates => Box::new(template_mixture(side, side, cfg.template_variance, sched)?),
        config::ScoreModelSpec::Mlp(dir) => {
            let m = MlpScore::load(dir, sched)?;
            if m.shape() != [1, side, side] {
                return Err(Error::shape("score model", &[1, side, side], m.shape()));
            }
            Box::new(m)
        }
    })
}

/// Result of generating content for one attacker region.
#[derive(Clone, Debug)]
pub struct Generation {
    pub region: Mask,
    pub attacked: Tensor,
    pub xi: f64,
    pub records: Vec<StepRecord>,
}

/// Guided inpainting of `region` over `base`, then compositing. The energy
/// pushes the target depth toward `goal`.
fn generate(
    cfg: &AttackConfig,
    model: &dyn ScoreModel,
    scene: &ToyScene,
    base: &Tensor,
    region: &Mask,
    gamma: f64,
    seed: u64,
) -> Result<(Tensor, Vec<StepRecord>)> {
    let goal = masked_depth(&scene.victim, &scene.x, &scene.target)?.scale(cfg.lambda);
    let graph = depth_goal_fn(&scene.victim, base, &scene.target, Some(region), &goal)?;
    let hook = GuidanceHook::new(cfg.mode, EnergyFunction::new(graph, "adversarial")?, gamma)
        .with_gamma_schedule(cfg.gamma_schedule)
        .with_linearization(cfg.linearization);
    let scfg = SamplerConfig {
        seed,
        mask_reproject: cfg.mask_reproject,
        known: Some(KnownRegion { image: base.clone(), mask: region.clone() }),
    };
    let cond = if cfg.condition_on_class { Condition::label(scene.class) } else { Condition::none() };
    let traj = sample(model, &cond, &scfg, Some(&hook))?;
    let mut object = traj.terminal().clone();
    if cfg.clip_object {
        object = object.map(|v| v.clamp(0.0, 1.0));
    }
    if cfg.quantize_roundtrip {
        object = quantize_roundtrip(&object);
    }
    Ok((compose_scene(base, &object, region)?, traj.records))
}

/// Attacks with the first `j` of `regions` for every `j`, or only with all of
/// them when `cumulative` is false.
fn attack_regions(
    cfg: &AttackConfig,
    model: &dyn ScoreModel,
    scene: &ToyScene,
    regions: &[&Mask],
    gamma: f64,
    seed: u64,
    cumulative: bool,
) -> Result<Vec<Generation>> {
    let counts: Vec<usize> = if cumulative { (1..=regions.len()).collect() } else { vec![regions.len()] };
    let mut out = Vec::with_capacity(counts.len());
    if cfg.sequential {
        let mut current = scene.x.clone();
        let mut union: Option<Mask> = None;
        for (j, r) in regions.iter().enumerate() {
            let (next, records) = generate(cfg, model, scene, &current, r, gamma, seed)?;
            current = next;
            union = Some(match union {
                None => (*r).clone(),
                Some(u) => u.union(r)?,
            });
            if counts.contains(&(j + 1)) {
                out.push(Generation {
                    region: union.clone().expect("set above"),
                    xi: mrsr(&scene.victim, &scene.x, &current, &scene.target)?,
                    attacked: current.clone(),
                    records,
                });
            }
        }
    } else {
        for j in counts {
            let mut region = regions[0].clone();
            for r in &regions[1..j] {
                region = region.union(r)?;
            }
            let (attacked, records) = generate(cfg, model, scene, &scene.x, &region, gamma, seed)?;
            out.push(Generation {
                xi: mrsr(&scene.victim, &scene.x, &attacked, &scene.target)?,
                region,
                attacked,
                records,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub scene: usize,
    pub victim: String,
    pub score_model: String,
    pub saliency: Option<SaliencyResult>,
    /// Rank of the planted patch in the saliency ranking (0 = best).
    pub planted_rank: Option<usize>,
    /// Shift ratio after attacking the top `j` regions, `j = 1..=k`.
    pub xi: Vec<f64>,
    /// The same with guidance switched off.
    pub xi_control: Vec<f64>,
    pub scene_image: Tensor,
    pub target: Mask,
    pub region: Option<Mask>,
    pub attacked: Option<Tensor>,
    pub control: Option<Tensor>,
    pub depth_before: Option<Tensor>,
    pub depth_after: Option<Tensor>,
    pub records: Vec<StepRecord>,
    pub background_error: Option<f64>,
    pub log_density: Option<f64>,
    pub wall_clock: Duration,
    pub error: Option<String>,
}

impl AttackReport {
    pub fn final_xi(&self) -> Option<f64> {
        self.xi.last().copied()
    }
}

/// Sampler seed for a scene; scenes share the configured seed offset.
pub fn scene_seed(cfg: &AttackConfig, scene: usize) -> u64 {
    cfg.seed.wrapping_add(scene as u64)
}

/// Runs the attack on an already built scene. Failures after the
/// configuration stage end up in `error` with everything computed so far.
pub fn run_attack_on(cfg: &AttackConfig, model: &dyn ScoreModel, scene: &ToyScene) -> AttackReport {
    let start = Instant::now();
    let mut rep = AttackReport {
        config: cfg.clone(),
        scene: scene.index,
        victim: scene.victim.describe(),
        score_model: model.describe(),
        saliency: None,
        planted_rank: None,
        xi: Vec::new(),
        xi_control: Vec::new(),
        scene_image: scene.x.clone(),
        target: scene.target.clone(),
        region: None,
        attacked: None,
        control: None,
        depth_before: None,
        depth_after: None,
        records: Vec::new(),
        background_error: None,
        log_density: None,
        wall_clock: Duration::ZERO,
        error: None,
    };
    if let Err(e) = fill_attack(cfg, model, scene, &mut rep) {
        rep.error = Some(e.to_string());
    }
    rep.wall_clock = start.elapsed();
    rep
}

fn fill_attack(cfg: &AttackConfig, model: &dyn ScoreModel, scene: &ToyScene, rep: &mut AttackReport) -> Result<()> {
    let f = &scene.victim;
    rep.depth_before = Some(f.depth(&scene.x)?);
    let srs_cfg = crate::saliency::SrsConfig { seed: cfg.seed, ..cfg.srs.clone() };
    let sal = salient_regions(&scene.x, &scene.target, f, &srs_cfg)?;
    rep.planted_rank = sal
        .ranking
        .iter()
        .position(|&i| sal.grid.patches[i].origin == scene.planted_origin);
    let regions: Vec<&Mask> = sal.topk().iter().map(|&i| &sal.grid.patches[i].mask).collect();
    let regions: Vec<Mask> = regions.into_iter().cloned().collect();
    rep.saliency = Some(sal);
    let refs: Vec<&Mask> = regions.iter().collect();
    let seed = scene_seed(cfg, scene.index);

    let control = attack_regions(cfg, model, scene, &refs, 0.0, seed, true)?;
    rep.xi_control = control.iter().map(|g| g.xi).collect();
    rep.control = control.last().map(|g| g.attacked.clone());

    let guided = attack_regions(cfg, model, scene, &refs, cfg.sampler_gamma(), seed, true)?;
    rep.xi = guided.iter().map(|g| g.xi).collect();
    let last = guided.into_iter().last().expect("k >= 1");
    let keep = last.region.tensor().map(|v| 1.0 - v);
    let outside = last.attacked.sub(&scene.x)?.mul(&keep.reshape(scene.x.shape())?)?;
    rep.background_error = Some(outside.max_abs());
    rep.depth_after = Some(f.depth(&last.attacked)?);
    rep.log_density = model.data_log_density(&last.attacked);
    rep.records = last.records;
    rep.region = Some(last.region);
    rep.attacked = Some(last.attacked);
    Ok(())
}

/// Single-scene attack for `cfg.scene`.
pub fn run_attack(cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let model = build_score_model(cfg)?;
    let scene = toy_scene(&cfg.ensemble, cfg.scene)?;
    Ok(run_attack_on(cfg, model.as_ref(), &scene))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub config: AttackConfig,
    pub reports: Vec<AttackReport>,
}

impl EnsembleReport {
    fn ok(&self) -> impl Iterator<Item = &AttackReport> {
        self.reports.iter().filter(|r| r.error.is_none())
    }

    pub fn failures(&self) -> usize {
        self.reports.iter().filter(|r| r.error.is_some()).count()
    }

    /// Mean shift ratio per region count `1..=k`.
    pub fn mean_xi(&self) -> Vec<f64> {
        (0..self.config.srs.k).map(|j| mean(self.ok().map(|r| r.xi[j]))).collect()
    }

    pub fn mean_control_xi(&self) -> Vec<f64> {
        (0..self.config.srs.k).map(|j| mean(self.ok().map(|r| r.xi_control[j]))).collect()
    }

    pub fn mean_abs_control_xi(&self) -> Vec<f64> {
        (0..self.config.srs.k).map(|j| mean(self.ok().map(|r| r.xi_control[j].abs()))).collect()
    }

    pub fn planted_top1_rate(&self) -> f64 {
        mean(self.reports.iter().map(|r| if r.planted_rank == Some(0) { 1.0 } else { 0.0 }))
    }

    pub fn max_background_error(&self) -> f64 {
        self.ok().filter_map(|r| r.background_error).fold(0.0, f64::max)
    }
}

/// Attacks every ensemble scene in parallel; reports are in scene order.
pub fn run_ensemble(cfg: &AttackConfig) -> Result<EnsembleReport> {
    cfg.validate()?;
    let model = build_score_model(cfg)?;
    let scenes = toy_ensemble(&cfg.ensemble)?;
    let reports = scenes
        .par_iter()
        .map(|s| run_attack_on(cfg, model.as_ref(), s))
        .collect();
    Ok(EnsembleReport { config: cfg.clone(), reports })
}

/// SRS-selected regions against uniformly drawn patches of the same grid.
#[derive(Clone, Debug)]
pub struct RandomRegionComparison {
    pub srs_mean_xi: f64,
    /// Ensemble-mean shift ratio for each random draw.
    pub random_mean_xi: Vec<f64>,
}

impl RandomRegionComparison {
    pub fn srs_win_rate(&self) -> f64 {
        mean(self.random_mean_xi.iter().map(|&r| if self.srs_mean_xi > r { 1.0 } else { 0.0 }))
    }
}

/// For each draw, every scene gets `k` distinct patches chosen uniformly
/// from its candidate grid; the guided attack then runs on them jointly.
pub fn compare_with_random_regions(ensemble: &EnsembleReport, draws: usize) -> Result<RandomRegionComparison> {
    let cfg = &ensemble.config;
    let model = build_score_model(cfg)?;
    let scenes = toy_ensemble(&cfg.ensemble)?;
    let k = cfg.srs.k;
    let srs_mean_xi = mean(ensemble.ok().map(|r| r.xi[k - 1]));
    let ok: Vec<&AttackReport> = ensemble.ok().collect();
    let mut random_mean_xi = Vec::with_capacity(draws);
    for d in 0..draws {
        let xs = ok
            .par_iter()
            .map(|r| {
                let sal = r.saliency.as_ref().expect("successful report");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
                rng.set_stream(((d as u64) << 32) | r.scene as u64);
                let picks = sample_indices(&mut rng, sal.grid.len(), k);
                let regions: Vec<&Mask> = picks.iter().map(|i| &sal.grid.patches[i].mask).collect();
                let scene = &scenes[r.scene];
                let g = attack_regions(cfg, model.as_ref(), scene, &regions, cfg.sampler_gamma(), scene_seed(cfg, r.scene), false)?;
                Ok(g[0].xi)
            })
            .collect::<Result<Vec<f64>>>()?;
        random_mean_xi.push(mean(xs.into_iter()));
    }
    Ok(RandomRegionComparison { srs_mean_xi, random_mean_xi })
}

/// Per-mode shift ratios and terminal data log-densities over shared seeds.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub modes: Vec<GuidanceMode>,
    pub seeds: Vec<u64>,
    /// `xi[m][s]`.
    pub xi: Vec<Vec<f64>>,
    pub log_density: Vec<Vec<f64>>,
}

impl ComparisonReport {
    pub fn mean_xi(&self, m: usize) -> f64 {
        mean(self.xi[m].iter().copied())
    }

    pub fn mean_log_density(&self, m: usize) -> f64 {
        mean(self.log_density[m].iter().copied())
    }
}

/// Seed `s` attacks scene `s mod scenes` with sampler seed `s`, reusing the
/// same SRS regions for every mode.
pub fn run_guidance_comparison(cfg: &AttackConfig, modes: &[GuidanceMode], seeds: &[u64]) -> Result<ComparisonReport> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::invalid("at least one guidance mode is required"));
    }
    let model = build_score_model(cfg)?;
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let scene = toy_scene(&cfg.ensemble, (seed % cfg.ensemble.scenes as u64) as usize)?;
            let srs_cfg = crate::saliency::SrsConfig { seed, ..cfg.srs.clone() };
            let sal = salient_regions(&scene.x, &scene.target, &scene.victim, &srs_cfg)?;
            let regions: Vec<&Mask> = sal.topk().iter().map(|&i| &sal.grid.patches[i].mask).collect();
            modes
                .iter()
                .map(|&mode| {
                    let mcfg = AttackConfig { mode, ..cfg.clone() };
                    let g = attack_regions(&mcfg, model.as_ref(), &scene, &regions, mcfg.sampler_gamma(), seed, false)?;
                    let ld = model.data_log_density(&g[0].attacked).unwrap_or(f64::NAN);
                    Ok((g[0].xi, ld))
                })
                .collect::<Result<Vec<(f64, f64)>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let xi = (0..modes.len()).map(|m| rows.iter().map(|r| r[m].0).collect()).collect();
    let log_density = (0..modes.len()).map(|m| rows.iter().map(|r| r[m].1).collect()).collect();
    Ok(ComparisonReport { modes: modes.to_vec(), seeds: seeds.to_vec(), xi, log_density })
}
