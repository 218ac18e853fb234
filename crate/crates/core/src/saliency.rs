//! Salient region selection: tile the scene into square candidate patches,
//! push each patch with normalized gradient ascent on the target-depth change,
//! and rank patches by the mean signed depth change they cause on the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffkernel::DifferentiableFn;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::{adv_loss_fn, masked_depth, Mask, MaskRole, VictimModel};

pub const DEFAULT_SIDE_FACTOR: f64 = 1.0;
pub const MIN_SIDE: usize = 2;

/// One candidate patch, possibly trimmed around the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub side: usize,
    pub stride: usize,
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// `round(c·√area)` clamped to `[2, min(H, W)/2]`.
pub fn patch_side(target_area: usize, h: usize, w: usize, side_factor: f64) -> Result<usize> {
    let max = h.min(w) / 2;
    if max < MIN_SIDE {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than the minimum patch grid")));
    }
    let raw = (side_factor * (target_area as f64).sqrt()).round();
    Ok((raw.max(0.0) as usize).clamp(MIN_SIDE, max))
}

/// Raster grid of full square patches with stride equal to the side. Patches
/// touching the target lose the target pixels; those left with less than half
/// their area are dropped.
pub fn partition_patches(image_shape: &[usize], m_t: &Mask, side_factor: f64) -> Result<PatchGrid> {
    if image_shape.len() != 3 {
        return Err(Error::invalid(format!("images are [C, H, W], got {image_shape:?}")));
    }
    let (h, w) = (image_shape[1], image_shape[2]);
    if m_t.height() != h || m_t.width() != w {
        return Err(Error::shape("partition_patches", &[h, w], &[m_t.height(), m_t.width()]));
    }
    if m_t.area() == 0 {
        return Err(Error::invalid("target mask is empty"));
    }
    let side = patch_side(m_t.area(), h, w, side_factor)?;
    let mut patches = Vec::new();
    for y0 in (0..=h - side).step_by(side) {
        for x0 in (0..=w - side).step_by(side) {
            let mut data = Tensor::zeros(&[h, w]);
            let mut kept = 0;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    if !m_t.contains(y, x) {
                        data.data_mut()[y * w + x] = 1.0;
                        kept += 1;
                    }
                }
            }
            if 2 * kept < side * side {
                continue;
            }
            patches.push(Patch {
                origin: (y0, x0),
                mask: Mask::new(data, MaskRole::Adversarial)?,
            });
        }
    }
    Ok(PatchGrid { side, stride: side, patches })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrsConfig {
    pub iterations: usize,
    pub step: f64,
    pub k: usize,
    /// Per-pixel bound `|u| ≤ clamp`.
    pub clamp: Option<f64>,
    pub side_factor: f64,
    pub seed: u64,
    /// Magnitude of the positive start that breaks the stationary point at `u = 0`.
    pub init_scale: f64,
}

impl Default for SrsConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            step: 0.05,
            k: 4,
            clamp: Some(0.5),
            side_factor: DEFAULT_SIDE_FACTOR,
            seed: 0,
            init_scale: 1e-6,
        }
    }
}

impl SrsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::invalid(format!("SRS step must be positive, got {}", self.step)));
        }
        if self.k == 0 {
            return Err(Error::invalid("SRS k must be at least 1"));
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("SRS clamp must be positive, got {c}")));
            }
        }
        if !(self.side_factor > 0.0) {
            return Err(Error::invalid("SRS side factor must be positive"));
        }
        Ok(())
    }
}

/// `u ↦ ‖f_{M_T}(x + u) − f_{M_T}(x)‖²` expressed over `z = x + u`.
pub fn patch_objective(f: &VictimModel, x: &Tensor, m_t: &Mask) -> Result<DifferentiableFn> {
    Ok(adv_loss_fn(f, x, m_t, None, 1.0)?.0)
}

/// Normalized gradient ascent of the target-depth change over perturbations
/// supported on `m_p`.
pub fn optimize_patch(x: &Tensor, m_t: &Mask, m_p: &Mask, f: &VictimModel, cfg: &SrsConfig) -> Result<Tensor> {
    let objective = patch_objective(f, x, m_t)?;
    optimize_with(&objective, x, m_t, m_p, cfg)
}

fn optimize_with(objective: &DifferentiableFn, x: &Tensor, m_t: &Mask, m_p: &Mask, cfg: &SrsConfig) -> Result<Tensor> {
    cfg.validate()?;
    if !m_p.is_disjoint(m_t) {
        return Err(Error::invalid("patch overlaps the target region"));
    }
    let channels = x.shape()[0];
    let support = m_p.broadcast(channels);
    let mut u = Tensor::zeros(x.shape());
    if cfg.iterations == 0 {
        return Ok(u);
    }
    // Stream keyed by the patch's first pixel so results do not depend on
    // processing order.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = m_p.tensor().data().iter().position(|&v| v == 1.0).unwrap_or(0);
    rng.set_stream(first as u64);
    for (v, &m) in u.data_mut().iter_mut().zip(support.data()) {
        if m == 1.0 {
            *v = cfg.init_scale * rng.random::<f64>();
        }
    }
    for _ in 0..cfg.iterations {
        let z = x.add(&u)?;
        let g = objective.grad(&z)?.mul(&support)?;
        let n = g.norm();
        if n == 0.0 {
            break;
        }
        if !n.is_finite() {
            return Err(Error::NonFinite { step: 0, what: "SRS gradient".into(), prefix: Vec::new() });
        }
        u = u.axpy(cfg.step / n, &g)?;
        let clamp = cfg.clamp.unwrap_or(f64::INFINITY);
        for ((v, &xv), &m) in u.data_mut().iter_mut().zip(x.data()).zip(support.data()) {
            *v = if m == 1.0 {
                v.clamp(-clamp, clamp).clamp(-xv, 1.0 - xv)
            } else {
                0.0
            };
        }
    }
    Ok(u)
}

/// Mean over the target of `f(x + u) − f(x)`.
pub fn region_score(x: &Tensor, m_t: &Mask, u: &Tensor, f: &VictimModel) -> Result<f64> {
    let before = masked_depth(f, x, m_t)?;
    region_score_from(&before, x, m_t, u, f)
}

fn region_score_from(before: &Tensor, x: &Tensor, m_t: &Mask, u: &Tensor, f: &VictimModel) -> Result<f64> {
    let after = masked_depth(f, &x.add(u)?, m_t)?;
    Ok(after.sub(before)?.sum() / m_t.area() as f64)
}

/// Indices of the `k` best scores, descending; ties go to the lower index,
/// which is raster order of patch origins.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("k = {k} with {} candidates", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Debug)]
pub struct SaliencyResult {
    pub grid: PatchGrid,
    /// Mean signed target-depth change per patch.
    pub scores: Vec<f64>,
    /// `‖f_{M_T}(x+u) − f_{M_T}(x)‖₂` per patch.
    pub objectives: Vec<f64>,
    pub perturbations: Vec<Tensor>,
    /// Full descending ranking.
    pub ranking: Vec<usize>,
    pub k: usize,
}

impl SaliencyResult {
    pub fn topk(&self) -> &[usize] {
        &self.ranking[..self.k]
    }

    pub fn topk_masks(&self) -> Vec<&Mask> {
        self.topk().iter().map(|&i| &self.grid.patches[i].mask).collect()
    }

    /// Union of the selected patches as an attacker region.
    pub fn selected_region(&self) -> Result<Mask> {
        let mut it = self.topk_masks().into_iter();
        let first = it.next().expect("k >= 1").clone();
        it.try_fold(first, |acc, m| acc.union(m))
    }

    /// `[H, W]` map with each patch filled by its score and the rest at the
    /// lowest score.
    pub fn heatmap(&self) -> Tensor {
        let first = &self.grid.patches[0].mask;
        let (h, w) = (first.height(), first.width());
        let floor = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let mut map = Tensor::full(&[h, w], floor);
        for (p, &s) in self.grid.patches.iter().zip(&self.scores) {
            for (v, &m) in map.data_mut().iter_mut().zip(p.mask.tensor().data()) {
                if m == 1.0 {
                    *v = s;
                }
            }
        }
        map
    }
}

/// Full selection pass over every candidate patch.
pub fn salient_regions(x: &Tensor, m_t: &Mask, f: &VictimModel, cfg: &SrsConfig) -> Result<SaliencyResult> {
    cfg.validate()?;
    let grid = partition_patches(x.shape(), m_t, cfg.side_factor)?;
    if grid.is_empty() {
        return Err(Error::NoCandidates("no patch survives removal of the target region".into()));
    }
    if cfg.k > grid.len() {
        return Err(Error::invalid(format!("k = {} exceeds the {} candidate patches", cfg.k, grid.len())));
    }
    let objective = patch_objective(f, x, m_t)?;
    let before = masked_depth(f, x, m_t)?;
    let per_patch: Vec<(Tensor, f64, f64)> = grid
        .patches
        .par_iter()
        .map(|p| {
            let u = optimize_with(&objective, x, m_t, &p.mask, cfg)?;
            let score = region_score_from(&before, x, m_t, &u, f)?;
            let obj = objective.evaluate(&[&x.add(&u)?])?.item()?.sqrt();
            Ok((u, score, obj))
        })
        .collect::<Result<_>>()?;
    let mut perturbations = Vec::with_capacity(per_patch.len());
    let mut scores = Vec::with_capacity(per_patch.len());
    let mut objectives = Vec::with_capacity(per_patch.len());
    for (u, s, o) in per_patch {
        perturbations.push(u);
        scores.push(s);
        objectives.push(o);
    }
    let ranking = select_topk(&scores, scores.len())?;
    Ok(SaliencyResult { grid, scores, objectives, perturbations, ranking, k: cfg.k })
}
