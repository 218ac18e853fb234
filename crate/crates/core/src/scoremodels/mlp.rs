use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_input, Condition, ScoreModel};
use crate::diffkernel::{DifferentiableFn, FnBuilder};
use crate::error::{Error, Result};
use crate::io;
use crate::schedule::{noise_to_level, NoiseSchedule};
use crate::tensor::Tensor;

/// Number of time features fed alongside `z`: `√ᾱ`, `√(1−ᾱ)`, `sin`, `cos`.
const TIME_FEATURES: usize = 4;

/// Fully connected `tanh` network mapping `(z_t, time features, one-hot class)`
/// to a score of the same shape as `z_t`.
#[derive(Clone, Debug)]
pub struct MlpScore {
    shape: Vec<usize>,
    hidden: Vec<usize>,
    classes: usize,
    seed: u64,
    params: Vec<Tensor>,
    graph: DifferentiableFn,
    schedule: NoiseSchedule,
}

impl MlpScore {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn seeded(
        shape: &[usize],
        hidden: &[usize],
        classes: usize,
        seed: u64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::param_shapes(shape, hidden, classes)
            .into_iter()
            .map(|s| {
                if s.len() == 2 {
                    Tensor::randn(&s, &mut rng).scale(1.0 / (s[1] as f64).sqrt())
                } else {
                    Tensor::zeros(&s)
                }
            })
            .collect();
        Self::from_params(shape, hidden, classes, seed, params, schedule)
    }

    pub fn zeros(shape: &[usize], hidden: &[usize], classes: usize, schedule: NoiseSchedule) -> Result<Self> {
        let params = Self::param_shapes(shape, hidden, classes)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self::from_params(shape, hidden, classes, 0, params, schedule)
    }

    fn param_shapes(shape: &[usize], hidden: &[usize], classes: usize) -> Vec<Vec<usize>> {
        let n: usize = shape.iter().product();
        let mut fan_in = n + TIME_FEATURES + classes;
        let mut out = Vec::new();
        for &h in hidden.iter().chain(std::iter::once(&n)) {
            out.push(vec![h, fan_in]);
            out.push(vec![h]);
            fan_in = h;
        }
        out
    }

    pub fn from_params(
        shape: &[usize],
        hidden: &[usize],
        classes: usize,
        seed: u64,
        params: Vec<Tensor>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "invalid MLP geometry: shape {shape:?}, hidden {hidden:?}"
            )));
        }
        let expected = Self::param_shapes(shape, hidden, classes);
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "MLP expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&expected).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::shape(format!("MLP parameter #{i}"), s, p.shape()));
            }
        }
        let graph = Self::build_graph(shape, &expected, classes)?;
        Ok(Self {
            shape: shape.to_vec(),
            hidden: hidden.to_vec(),
            classes,
            seed,
            params,
            graph,
            schedule,
        })
    }

    fn build_graph(shape: &[usize], param_shapes: &[Vec<usize>], classes: usize) -> Result<DifferentiableFn> {
        let mut b = FnBuilder::new();
        let z = b.input(shape);
        let feats = b.input(&[TIME_FEATURES + classes]);
        let params: Vec<_> = param_shapes.iter().map(|s| b.input(s)).collect();
        let zf = b.flatten(z);
        let mut h = b.concat(&[zf, feats])?;
        let layers = params.len() / 2;
        for l in 0..layers {
            h = b.affine(params[2 * l], h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = b.tanh(h);
            }
        }
        let out = b.reshape(h, shape)?;
        b.build(out)
    }

    fn features(&self, t: usize, c: &Condition) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t);
        let phase = 2.0 * std::f64::consts::PI * t as f64 / self.schedule.steps() as f64;
        let mut f = vec![ab.sqrt(), (1.0 - ab).sqrt(), phase.sin(), phase.cos()];
        f.resize(TIME_FEATURES + self.classes, 0.0);
        if let Some(k) = c.label {
            if k >= self.classes {
                return Err(Error::invalid(format!(
                    "label {k} out of range for {} classes",
                    self.classes
                )));
            }
            f[TIME_FEATURES + k] = 1.0;
        }
        Ok(Tensor::vector(f))
    }

    fn inputs<'a>(&'a self, z: &'a Tensor, feats: &'a Tensor) -> Vec<&'a Tensor> {
        let mut v = vec![z, feats];
        v.extend(self.params.iter());
        v
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn with_params(&self, params: Vec<Tensor>) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    /// Writes one raw tensor per parameter plus `manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let manifest = format!(
            "shape = {}\nhidden = {}\nclasses = {}\nseed = {}\nschedule = {}\nparams = {}\n",
            join(&self.shape),
            join(&self.hidden),
            self.classes,
            self.seed,
            self.schedule.id(),
            self.params.len()
        );
        io::write_text(&dir.join("manifest.txt"), &manifest)?;
        for (i, p) in self.params.iter().enumerate() {
            io::write_tensor(&dir.join(format!("param{i:02}.f64")), p)?;
        }
        Ok(())
    }

    /// Loads a model written by [`save`](Self::save); the manifest's schedule
    /// id must match `schedule`.
    pub fn load(dir: &Path, schedule: NoiseSchedule) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let ctx = path.display().to_string();
        let kv = io::parse_key_values(&io::read_text(&path)?, &ctx)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::parse(&ctx, format!("missing `{k}`")))
        };
        let list = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| p.trim().parse().map_err(|e| Error::parse(&ctx, format!("{e}"))))
                .collect()
        };
        let shape = list(get("shape")?)?;
        let hidden = list(get("hidden")?)?;
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|e| Error::parse(&ctx, format!("`{k}`: {e}")))
        };
        let classes = num("classes")? as usize;
        let seed = num("seed")?;
        let count = num("params")? as usize;
        if get("schedule")? != schedule.id() {
            return Err(Error::invalid(format!(
                "model was trained with schedule `{}`, not `{}`",
                get("schedule")?,
                schedule.id()
            )));
        }
        let params = (0..count)
            .map(|i| io::read_tensor(&dir.join(format!("param{i:02}.f64"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(&shape, &hidden, classes, seed, params, schedule)
    }
}

impl ScoreModel for MlpScore {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, z: &Tensor, t: usize, c: &Condition) -> Result<Tensor> {
        check_input(self, z, t, "mlp_score")?;
        let feats = self.features(t, c)?;
        self.graph.evaluate(&self.inputs(z, &feats))
    }

    fn score_jvp(&self, z: &Tensor, t: usize, c: &Condition, v: &Tensor) -> Result<Tensor> {
        self.score_and_jvp(z, t, c, v).map(|(_, jv)| jv)
    }

    fn score_and_jvp(&self, z: &Tensor, t: usize, c: &Condition, v: &Tensor) -> Result<(Tensor, Tensor)> {
        check_input(self, z, t, "mlp_score")?;
        let feats = self.features(t, c)?;
        self.graph.jvp_wrt(&self.inputs(z, &feats), 0, v)
    }

    fn score_vjp(&self, z: &Tensor, t: usize, c: &Condition, w: &Tensor) -> Result<Tensor> {
        check_input(self, z, t, "mlp_score")?;
        let feats = self.features(t, c)?;
        let (_, mut grads) = self.graph.vjp_all(&self.inputs(z, &feats), w)?;
        Ok(grads.swap_remove(0))
    }

    fn describe(&self) -> String {
        format!(
            "mlp(shape={:?}, hidden={:?}, classes={}, seed={})",
            self.shape, self.hidden, self.classes, self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub struct DsmConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// Denoising score matching on unlabeled data; see [`dsm_train_labeled`].
pub fn dsm_train(init: &MlpScore, dataset: &[Tensor], cfg: &DsmConfig) -> Result<(MlpScore, Vec<f64>)> {
    let labeled: Vec<(Tensor, Condition)> =
        dataset.iter().map(|x| (x.clone(), Condition::none())).collect();
    dsm_train_labeled(init, &labeled, cfg)
}

/// Adam on the per-sample loss `‖√(1−ᾱ_t)·s(z_t, t | c) + ε‖² / n` with
/// `z_t` drawn by the forward process from a uniform `(x, t, ε)`. Its
/// minimizer is the same as regressing `s` onto `−ε/√(1−ᾱ_t)`.
///
/// Returns the trained model and the per-step mean loss.
pub fn dsm_train_labeled(
    init: &MlpScore,
    dataset: &[(Tensor, Condition)],
    cfg: &DsmConfig,
) -> Result<(MlpScore, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dsm_train needs a nonempty dataset"));
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::invalid("dsm_train needs lr > 0 and batch > 0"));
    }
    for (x, _) in dataset {
        x.same_shape(&Tensor::zeros(init.shape()), "dsm_train sample")?;
    }
    let sched = init.schedule.clone();
    let n = init.graph.input_shapes()[0].iter().product::<usize>() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.params.clone();
    let mut m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut v = m.clone();
    let (b1, b2, eps_adam) = (0.9f64, 0.999f64, 1e-8);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let draws: Vec<(usize, usize, Tensor)> = (0..cfg.batch)
            .map(|_| {
                let i = rng.random_range(0..dataset.len());
                let t = rng.random_range(1..=sched.steps());
                (i, t, Tensor::randn(init.shape(), &mut rng))
            })
            .collect();
        let model = init.with_params(params.clone());
        let per_sample = draws
            .par_iter()
            .map(|(i, t, eps)| -> Result<(f64, Vec<Tensor>)> {
                let (x, c) = &dataset[*i];
                let zt = noise_to_level(x, *t, eps, &sched)?;
                let feats = model.features(*t, c)?;
                let inputs = model.inputs(&zt, &feats);
                let w = (1.0 - sched.alpha_bar(*t)).sqrt();
                let s = model.graph.evaluate(&inputs)?;
                let resid = s.scale(w).add(eps)?;
                let loss = resid.dot(&resid)? / n;
                let cot = resid.scale(2.0 * w / (n * cfg.batch as f64));
                let (_, grads) = model.graph.vjp_all(&inputs, &cot)?;
                Ok((loss, grads.into_iter().skip(2).collect()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (l, g) in &per_sample {
            loss += l / cfg.batch as f64;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi)?;
            }
        }
        trace.push(loss);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss, trace });
        }
        let k = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for ((p, g), (mi, vi)) in params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (j, gj) in gd.iter().enumerate() {
                let mj = &mut mi.data_mut()[j];
                *mj = b1 * *mj + (1.0 - b1) * gj;
                let vj = &mut vi.data_mut()[j];
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                pd[j] -= cfg.lr * (*mj / c1) / ((*vj / c2).sqrt() + eps_adam);
            }
        }
    }
    let trained = init.with_params(params);
    Ok((trained, trace))
}
