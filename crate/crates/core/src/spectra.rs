//! Singular structure of the score Jacobian: dense assembly from JVP columns,
//! matrix-free extremal pairs by power iteration, and the experiment that
//! nudges a trajectory along the top or bottom left singular direction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampler::{Sampler, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::scoremodels::{Condition, GaussianMixtureScore, ScoreModel};
use crate::tensor::Tensor;

pub const MAX_DENSE_DIM: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMethod {
    FullSvd,
    PowerIteration,
}

impl fmt::Display for SpectralMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectralMethod::FullSvd => "full_svd",
            SpectralMethod::PowerIteration => "power_iteration",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extremal {
    Top,
    Bottom,
}

impl fmt::Display for Extremal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extremal::Top => "top",
            Extremal::Bottom => "bottom",
        })
    }
}

impl FromStr for Extremal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" | "u+" => Ok(Extremal::Top),
            "bottom" | "u-" => Ok(Extremal::Bottom),
            other => Err(Error::parse("direction", format!("expected top or bottom, got `{other}`"))),
        }
    }
}

/// Singular triples in descending order. Each right vector has its
/// largest-magnitude entry positive, and `u = J·v / σ`.
#[derive(Clone, Debug)]
pub struct SpectralResult {
    pub values: Vec<f64>,
    pub left: Vec<Tensor>,
    pub right: Vec<Tensor>,
    pub method: SpectralMethod,
    pub converged: bool,
    pub iterations: usize,
}

fn dim(model: &dyn ScoreModel) -> usize {
    model.shape().iter().product()
}

/// Dense `n×n` Jacobian `∂s/∂z` as a `[n, n]` tensor.
pub fn full_jacobian(model: &dyn ScoreModel, z: &Tensor, t: usize, c: &Condition) -> Result<Tensor> {
    let n = dim(model);
    if n > MAX_DENSE_DIM {
        return Err(Error::Unsupported(format!(
            "dense Jacobian of dimension {n} exceeds {MAX_DENSE_DIM}; use power iteration"
        )));
    }
    let cols: Vec<Tensor> = (0..n)
        .into_par_iter()
        .map(|j| model.score_jvp(z, t, c, &Tensor::basis(model.shape(), j)))
        .collect::<Result<_>>()?;
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.data().iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    Tensor::matrix(n, n, data)
}

fn canonical_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full SVD of a square `[n, n]` matrix; vectors are flat `[n]` tensors.
pub fn full_svd(j: &Tensor) -> Result<SpectralResult> {
    let (r, c) = j.as_matrix_dims("full_svd")?;
    let m = DMatrix::from_row_slice(r, c, j.data());
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut values = Vec::new();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for k in order {
        let s = svd.singular_values[k];
        let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
        canonical_sign(&mut v);
        let jv = &m * nalgebra::DVector::from_column_slice(&v);
        let u: Vec<f64> = if s > 0.0 { jv.iter().map(|x| x / s).collect() } else { vec![0.0; r] };
        values.push(s);
        right.push(Tensor::vector(v));
        left.push(Tensor::vector(u));
    }
    Ok(SpectralResult { values, left, right, method: SpectralMethod::FullSvd, converged: true, iterations: 0 })
}

fn unit(t: Tensor) -> Tensor {
    let n = t.norm();
    t.scale(1.0 / n)
}

fn power(
    apply: impl Fn(&Tensor) -> Result<Tensor>,
    start: Tensor,
    iters: usize,
    tol: f64,
) -> Result<(Tensor, f64, bool, usize)> {
    let mut v = unit(start);
    let mut est = f64::NAN;
    for k in 1..=iters {
        let w = apply(&v)?;
        let next = v.dot(&w)?;
        let n = w.norm();
        if !n.is_finite() {
            return Err(Error::NonFinite { step: 0, what: "power iteration".into(), prefix: Vec::new() });
        }
        if n == 0.0 {
            return Ok((v, 0.0, true, k));
        }
        v = w.scale(1.0 / n);
        if (next - est).abs() < tol {
            return Ok((v, next, true, k));
        }
        est = next;
    }
    Ok((v, est, false, iters))
}

/// Largest or smallest singular pair of `J_s(z)` using only JVP/VJP.
///
/// The bottom pair runs on `μI − JᵀJ` with `μ` just above `σ_max²`.
/// `tol` bounds the change between successive `σ²` estimates.
pub fn extremal_singular(
    model: &dyn ScoreModel,
    z: &Tensor,
    t: usize,
    c: &Condition,
    which: Extremal,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<SpectralResult> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one iteration"));
    }
    let shape = model.shape();
    let gram = |v: &Tensor| -> Result<Tensor> {
        let jv = model.score_jvp(z, t, c, v)?;
        model.score_vjp(z, t, c, &jv)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::randn(shape, &mut rng);
    let (v_top, s2_top, ok_top, k_top) = power(gram, start.clone(), iters, tol)?;
    let (v, total, converged) = match which {
        Extremal::Top => (v_top, k_top, ok_top),
        Extremal::Bottom => {
            let mu = s2_top.max(0.0) * 1.01 + 1e-12;
            let shifted = |v: &Tensor| -> Result<Tensor> { Ok(v.scale(mu).sub(&gram(v)?)?) };
            let (v, _, ok, k) = power(shifted, start, iters, tol)?;
            (v, k_top + k, ok && ok_top)
        }
    };
    let mut vd = v.into_data();
    canonical_sign(&mut vd);
    let v = Tensor::new(shape, vd)?;
    let jv = model.score_jvp(z, t, c, &v)?;
    let sigma = jv.norm();
    let u = if sigma > 0.0 { jv.scale(1.0 / sigma) } else { Tensor::zeros(shape) };
    Ok(SpectralResult {
        values: vec![sigma],
        left: vec![u],
        right: vec![v],
        method: SpectralMethod::PowerIteration,
        converged,
        iterations: total,
    })
}

/// 16-dimensional mixture of four separated components whose per-axis
/// variances span two decades, each component stretched along different axes.
pub fn anisotropic_mixture(schedule: NoiseSchedule) -> Result<GaussianMixtureScore> {
    const N: usize = 16;
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for k in 0..4 {
        // Rows of a 16-point Hadamard pattern, scaled for separation.
        let mean: Vec<f64> = (0..N)
            .map(|i| if ((i & (k + 1)).count_ones() % 2) == 0 { 1.5 } else { -1.5 })
            .collect();
        let var: Vec<f64> = (0..N)
            .map(|i| {
                let r = (i + 4 * k) % N;
                10f64.powf(-2.0 * r as f64 / (N - 1) as f64)
            })
            .collect();
        means.push(Tensor::vector(mean));
        variances.push(Tensor::vector(var));
    }
    GaussianMixtureScore::new(vec![0.25; 4], means, variances, schedule)
}

/// Settings shared by every injection run.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionConfig {
    pub t_inject: usize,
    pub magnitude: f64,
    pub iters: usize,
    pub tol: f64,
}

impl InjectionConfig {
    /// Midpoint of the schedule, unit magnitude.
    pub fn for_schedule(sched: &NoiseSchedule) -> Self {
        Self { t_inject: sched.steps() / 2, magnitude: 1.0, iters: 20_000, tol: 1e-13 }
    }
}

#[derive(Clone, Debug)]
pub enum Direction {
    /// Left singular vector of the largest singular value at the injection state.
    Top,
    /// Left singular vector of the smallest singular value.
    Bottom,
    Fixed(Tensor),
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::Top => "u+",
            Direction::Bottom => "u-",
            Direction::Fixed(_) => "fixed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct InjectionRecord {
    pub seed: u64,
    pub direction: &'static str,
    pub magnitude: f64,
    pub singular_value: Option<f64>,
    pub terminal: Tensor,
    pub log_density: f64,
}

fn log_density_of(model: &dyn ScoreModel, z0: &Tensor) -> Result<f64> {
    model
        .data_log_density(z0)
        .ok_or_else(|| Error::Unsupported(format!("{} has no closed-form data density", model.describe())))
}

/// Unguided trajectory from `seed`, shifted by `magnitude·direction` at
/// `t_inject`, run to completion.
pub fn inject_direction(
    model: &dyn ScoreModel,
    c: &Condition,
    seed: u64,
    cfg: &InjectionConfig,
    direction: &Direction,
) -> Result<InjectionRecord> {
    let steps = model.schedule().steps();
    if cfg.t_inject == 0 || cfg.t_inject > steps {
        return Err(Error::StepOutOfRange { t: cfg.t_inject, steps });
    }
    if model.data_log_density(&Tensor::zeros(model.shape())).is_none() {
        return Err(Error::Unsupported(format!("{} has no closed-form data density", model.describe())));
    }
    let scfg = SamplerConfig::seeded(seed);
    let mut s = Sampler::new(model, *c, &scfg, None)?;
    s.run_to(cfg.t_inject)?;
    let (dir, sv) = match direction {
        Direction::Fixed(d) => {
            d.same_shape(s.state(), "inject_direction")?;
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("injection direction must have unit norm"));
            }
            (d.clone(), None)
        }
        Direction::Top | Direction::Bottom => {
            let which = if matches!(direction, Direction::Top) { Extremal::Top } else { Extremal::Bottom };
            let r = extremal_singular(model, s.state(), cfg.t_inject, c, which, cfg.iters, cfg.tol, seed)?;
            (r.left[0].clone(), Some(r.values[0]))
        }
    };
    s.perturb(&dir.scale(cfg.magnitude))?;
    let terminal = s.finish()?.terminal().clone();
    Ok(InjectionRecord {
        seed,
        direction: direction.label(),
        magnitude: cfg.magnitude,
        singular_value: sv,
        log_density: log_density_of(model, &terminal)?,
        terminal,
    })
}

/// One seed's paired outcome.
#[derive(Clone, Debug)]
pub struct InjectionPair {
    pub seed: u64,
    pub baseline_log_density: f64,
    pub top: InjectionRecord,
    pub bottom: InjectionRecord,
    /// Terminal displacement from the unperturbed sample.
    pub top_displacement: f64,
    pub bottom_displacement: f64,
}

#[derive(Clone, Debug)]
pub struct InjectionSummary {
    pub pairs: Vec<InjectionPair>,
}

impl InjectionSummary {
    /// Fraction of seeds where the top-direction run ends more likely.
    pub fn top_win_rate(&self) -> f64 {
        let wins = self.pairs.iter().filter(|p| p.top.log_density > p.bottom.log_density).count();
        wins as f64 / self.pairs.len() as f64
    }

    pub fn mean_log_density(&self) -> (f64, f64, f64) {
        let n = self.pairs.len() as f64;
        let sum = |f: &dyn Fn(&InjectionPair) -> f64| self.pairs.iter().map(f).sum::<f64>() / n;
        (
            sum(&|p| p.baseline_log_density),
            sum(&|p| p.top.log_density),
            sum(&|p| p.bottom.log_density),
        )
    }

    pub fn mean_displacement(&self) -> (f64, f64) {
        let n = self.pairs.len() as f64;
        (
            self.pairs.iter().map(|p| p.top_displacement).sum::<f64>() / n,
            self.pairs.iter().map(|p| p.bottom_displacement).sum::<f64>() / n,
        )
    }
}

/// Paired top/bottom injections over `seeds`, run in parallel and collected
/// in seed order.
pub fn injection_experiment(
    model: &dyn ScoreModel,
    c: &Condition,
    seeds: &[u64],
    cfg: &InjectionConfig,
) -> Result<InjectionSummary> {
    let pairs = seeds
        .par_iter()
        .map(|&seed| {
            let base = inject_direction(model, c, seed, &InjectionConfig { magnitude: 0.0, ..cfg.clone() }, &Direction::Fixed(unit(Tensor::ones(model.shape()))))?;
            let top = inject_direction(model, c, seed, cfg, &Direction::Top)?;
            let bottom = inject_direction(model, c, seed, cfg, &Direction::Bottom)?;
            Ok(InjectionPair {
                seed,
                baseline_log_density: base.log_density,
                top_displacement: top.terminal.sub(&base.terminal)?.norm(),
                bottom_displacement: bottom.terminal.sub(&base.terminal)?.norm(),
                top,
                bottom,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InjectionSummary { pairs })
}
