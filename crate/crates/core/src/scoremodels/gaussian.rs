use super::{check_input, Condition, ScoreModel};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact score of a diagonal-covariance Gaussian mixture pushed through the
/// forward process: component `k` at step `t` has mean `√ᾱ·μ_k` and
/// covariance `ᾱ·Σ_k + (1−ᾱ)·I`.
#[derive(Clone, Debug)]
pub struct GaussianMixtureScore {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Tensor>,
    variances: Vec<Tensor>,
    schedule: NoiseSchedule,
}

/// Per-component quantities at one `(z, t)`.
struct Components {
    /// `−(z − m_k)/S_k`.
    scores: Vec<Tensor>,
    inv_cov: Vec<Tensor>,
    resp: Vec<f64>,
    log_density: f64,
}

impl GaussianMixtureScore {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Tensor>,
        variances: Vec<Tensor>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len() {
            return Err(Error::invalid(format!(
                "mixture needs matching nonempty weights/means/variances, got {}/{}/{}",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let shape = means[0].shape().to_vec();
        for (m, v) in means.iter().zip(&variances) {
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::shape("gaussian mixture", &shape, v.shape()));
            }
            if v.data().iter().any(|x| !(*x > 0.0)) {
                return Err(Error::invalid("mixture variances must be positive"));
            }
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            means,
            variances,
            schedule,
        })
    }

    pub fn gaussian(mean: Tensor, variance: Tensor, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance], schedule)
    }

    /// Standard normal data; its noised marginals stay standard normal.
    pub fn unit_gaussian(shape: &[usize], schedule: NoiseSchedule) -> Self {
        Self::gaussian(Tensor::zeros(shape), Tensor::ones(shape), schedule)
            .expect("unit gaussian is valid")
    }

    /// Equal-weight mixture with a shared isotropic variance.
    pub fn equal_weights(means: Vec<Tensor>, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        let k = means.len();
        let vars = means
            .iter()
            .map(|m| Tensor::full(m.shape(), variance))
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vars, schedule)
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn variances(&self) -> &[Tensor] {
        &self.variances
    }

    /// Diagonal of `S_k(t) = ᾱ_t·Σ_k + (1−ᾱ_t)·I`.
    pub fn marginal_variance(&self, k: usize, t: usize) -> Tensor {
        let ab = self.schedule.alpha_bar(t);
        self.variances[k].map(|v| ab * v + (1.0 - ab))
    }

    fn active(&self, c: &Condition) -> Result<Vec<usize>> {
        match c.label {
            None => Ok((0..self.num_components()).collect()),
            Some(k) if k < self.num_components() => Ok(vec![k]),
            Some(k) => Err(Error::invalid(format!(
                "label {k} out of range for {} components",
                self.num_components()
            ))),
        }
    }

    fn components(&self, z: &Tensor, ab: f64, active: &[usize]) -> Components {
        let sab = ab.sqrt();
        let mut scores = Vec::with_capacity(active.len());
        let mut inv_cov = Vec::with_capacity(active.len());
        let mut logits = Vec::with_capacity(active.len());
        for &k in active {
            let inv = self.variances[k].map(|v| 1.0 / (ab * v + (1.0 - ab)));
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let s: Vec<f64> = z
                .data()
                .iter()
                .zip(self.means[k].data())
                .zip(inv.data())
                .map(|((zi, mi), ii)| {
                    let d = zi - sab * mi;
                    quad += d * d * ii;
                    logdet -= ii.ln();
                    -d * ii
                })
                .collect();
            let n = z.len() as f64;
            logits.push(self.log_weights[k] - 0.5 * (quad + logdet + n * LN_2PI));
            scores.push(Tensor::new(z.shape(), s).expect("component score shape"));
            inv_cov.push(inv);
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let log_density = top + norm.ln();
        let resp = logits.iter().map(|l| (l - log_density).exp()).collect();
        Components {
            scores,
            inv_cov,
            resp,
            log_density,
        }
    }

    fn mean_score(comp: &Components) -> Tensor {
        if comp.scores.len() == 1 {
            return comp.scores[0].clone();
        }
        let mut s = Tensor::zeros(comp.scores[0].shape());
        for (sk, r) in comp.scores.iter().zip(&comp.resp) {
            s = s.axpy(*r, sk).expect("shapes agree");
        }
        s
    }

    /// `J·v = Σ r_k(−v/S_k) + Σ r_k(s_k·v)s_k − (s̄·v)s̄`; symmetric in `v`.
    fn jacobian_product(comp: &Components, v: &Tensor) -> Tensor {
        if comp.scores.len() == 1 {
            return v
                .zip_map(&comp.inv_cov[0], "score jvp", |a, b| -a * b)
                .expect("shapes agree");
        }
        let mut out = Tensor::zeros(v.shape());
        let mean = Self::mean_score(comp);
        for ((sk, inv), r) in comp.scores.iter().zip(&comp.inv_cov).zip(&comp.resp) {
            let curv = v.zip_map(inv, "score jvp", |a, b| -a * b).expect("shapes agree");
            let proj = sk.dot(v).expect("shapes agree");
            out = out.axpy(*r, &curv).expect("shapes agree");
            out = out.axpy(r * proj, sk).expect("shapes agree");
        }
        let proj = mean.dot(v).expect("shapes agree");
        out.axpy(-proj, &mean).expect("shapes agree")
    }

    /// `log p_t(z | c)` of the noised marginal.
    pub fn log_density(&self, z: &Tensor, t: usize, c: &Condition) -> Result<f64> {
        check_input(self, z, t, "log_density")?;
        let active = self.active(c)?;
        Ok(self.components(z, self.schedule.alpha_bar(t), &active).log_density)
    }

    /// Posterior responsibilities of each component at `(z, t)`.
    pub fn responsibilities(&self, z: &Tensor, t: usize) -> Result<Vec<f64>> {
        check_input(self, z, t, "responsibilities")?;
        let active: Vec<usize> = (0..self.num_components()).collect();
        Ok(self.components(z, self.schedule.alpha_bar(t), &active).resp)
    }
}

impl ScoreModel for GaussianMixtureScore {
    fn shape(&self) -> &[usize] {
        self.means[0].shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, z: &Tensor, t: usize, c: &Condition) -> Result<Tensor> {
        check_input(self, z, t, "gaussian_mixture_score")?;
        let active = self.active(c)?;
        let comp = self.components(z, self.schedule.alpha_bar(t), &active);
        Ok(Self::mean_score(&comp))
    }

    fn score_jvp(&self, z: &Tensor, t: usize, c: &Condition, v: &Tensor) -> Result<Tensor> {
        self.score_and_jvp(z, t, c, v).map(|(_, jv)| jv)
    }

    fn score_vjp(&self, z: &Tensor, t: usize, c: &Condition, w: &Tensor) -> Result<Tensor> {
        // The Jacobian is the Hessian of a log-density, hence symmetric.
        self.score_jvp(z, t, c, w)
    }

    fn score_and_jvp(
        &self,
        z: &Tensor,
        t: usize,
        c: &Condition,
        v: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        check_input(self, z, t, "gaussian_mixture_score")?;
        z.same_shape(v, "score jvp")?;
        let active = self.active(c)?;
        let comp = self.components(z, self.schedule.alpha_bar(t), &active);
        Ok((Self::mean_score(&comp), Self::jacobian_product(&comp, v)))
    }

    fn data_log_density(&self, z0: &Tensor) -> Option<f64> {
        if z0.shape() != self.shape() {
            return None;
        }
        let active: Vec<usize> = (0..self.num_components()).collect();
        Some(self.components(z0, 1.0, &active).log_density)
    }

    fn describe(&self) -> String {
        format!(
            "gaussian_mixture(components={}, shape={:?}, schedule={})",
            self.num_components(),
            self.shape(),
            self.schedule.id()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::desk_default()
    }

    #[test]
    fn unit_gaussian_score_is_minus_z() {
        let m = GaussianMixtureScore::unit_gaussian(&[3], sched());
        let z = Tensor::vector(vec![0.5, -1.0, 2.0]);
        for t in [0, 1, 25, 50] {
            let s = m.score(&z, t, &Condition::none()).unwrap();
            assert!(max_abs_diff(&s, &z.scale(-1.0)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn clean_level_score_is_data_score() {
        let mu = Tensor::vector(vec![1.0, -2.0]);
        let var = Tensor::vector(vec![0.5, 4.0]);
        let m = GaussianMixtureScore::gaussian(mu.clone(), var.clone(), sched()).unwrap();
        let z = Tensor::vector(vec![0.3, 0.7]);
        let s = m.score(&z, 0, &Condition::none()).unwrap();
        let want = Tensor::vector(vec![-(0.3 - 1.0) / 0.5, -(0.7 + 2.0) / 4.0]);
        assert!(max_abs_diff(&s, &want).unwrap() < 1e-15);
    }

    fn two_bumps() -> GaussianMixtureScore {
        GaussianMixtureScore::equal_weights(
            vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![-1.0])],
            0.01,
            sched(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_mixture_vanishes_at_origin() {
        let m = two_bumps();
        let s = m.score(&Tensor::vector(vec![0.0]), 0, &Condition::none()).unwrap();
        assert_eq!(s.data(), &[0.0]);
    }

    #[test]
    fn mixture_score_matches_log_density_gradient() {
        let m = two_bumps();
        for (z, t) in [(0.5, 0), (0.05, 0), (0.3, 10), (-0.7, 40)] {
            let zt = Tensor::vector(vec![z]);
            let s = m.score(&zt, t, &Condition::none()).unwrap().data()[0];
            // Central differences of the independently summed density.
            let ab = m.schedule().alpha_bar(t);
            let var = ab * 0.01 + 1.0 - ab;
            let logp = |x: f64| {
                let g = |mu: f64| (-(x - ab.sqrt() * mu).powi(2) / (2.0 * var)).exp();
                (0.5 * g(1.0) + 0.5 * g(-1.0)).ln()
            };
            let h = 1e-6;
            let fd = (logp(z + h) - logp(z - h)) / (2.0 * h);
            assert!((s - fd).abs() <= 1e-6 * fd.abs().max(1.0), "z={z} t={t}: {s} vs {fd}");
        }
    }

    #[test]
    fn label_selects_component_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4], &mut rng)).collect();
        let vars: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4], &mut rng).map(|v| 0.1 + v.abs()))
            .collect();
        let mix = GaussianMixtureScore::new(vec![0.2, 0.3, 0.5], means.clone(), vars.clone(), sched())
            .unwrap();
        let z = Tensor::randn(&[4], &mut rng);
        let v = Tensor::randn(&[4], &mut rng);
        for k in 0..3 {
            let single =
                GaussianMixtureScore::gaussian(means[k].clone(), vars[k].clone(), sched()).unwrap();
            let a = mix.score(&z, 17, &Condition::label(k)).unwrap();
            let b = single.score(&z, 17, &Condition::none()).unwrap();
            assert_eq!(a.data(), b.data());
            let a = mix.score_jvp(&z, 17, &Condition::label(k), &v).unwrap();
            let b = single.score_jvp(&z, 17, &Condition::none(), &v).unwrap();
            assert_eq!(a.data(), b.data());
        }
        assert!(mix.score(&z, 17, &Condition::label(3)).is_err());
    }

    #[test]
    fn mixture_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let means: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[6], &mut rng).scale(2.0)).collect();
        let mix = GaussianMixtureScore::equal_weights(means, 0.3, sched()).unwrap();
        let c = Condition::none();
        for t in [1, 20, 45] {
            let z = Tensor::randn(&[6], &mut rng);
            let v = Tensor::randn(&[6], &mut rng);
            let jv = mix.score_jvp(&z, t, &c, &v).unwrap();
            let h = 1e-5;
            let fd = mix
                .score(&z.axpy(h, &v).unwrap(), t, &c)
                .unwrap()
                .sub(&mix.score(&z.axpy(-h, &v).unwrap(), t, &c).unwrap())
                .unwrap()
                .scale(0.5 / h);
            assert!(relative_error(&jv, &fd, 1e-8).unwrap() < 1e-6);
        }
    }

    #[test]
    fn responsibilities_survive_far_separation() {
        let m = GaussianMixtureScore::equal_weights(
            vec![Tensor::vector(vec![100.0]), Tensor::vector(vec![-100.0])],
            1e-3,
            sched(),
        )
        .unwrap();
        let s = m.score(&Tensor::vector(vec![99.0]), 0, &Condition::none()).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let s = sched();
        let m = Tensor::zeros(&[2]);
        assert!(GaussianMixtureScore::new(vec![0.5, 0.4], vec![m.clone(), m.clone()], vec![Tensor::ones(&[2]); 2], s.clone()).is_err());
        assert!(GaussianMixtureScore::gaussian(m.clone(), Tensor::vector(vec![1.0, 0.0]), s.clone()).is_err());
        let g = GaussianMixtureScore::unit_gaussian(&[2], s);
        assert!(g.score(&Tensor::zeros(&[3]), 1, &Condition::none()).is_err());
        assert!(g.score(&Tensor::zeros(&[2]), 51, &Condition::none()).is_err());
    }

    proptest! {
        #[test]
        fn single_gaussian_jacobian_is_constant(
            z1 in proptest::collection::vec(-3.0f64..3.0, 3),
            z2 in proptest::collection::vec(-3.0f64..3.0, 3),
            v in proptest::collection::vec(-1.0f64..1.0, 3),
            t in 0usize..=50,
        ) {
            let m = GaussianMixtureScore::gaussian(
                Tensor::vector(vec![0.5, -1.0, 2.0]),
                Tensor::vector(vec![4.0, 1.0, 0.25]),
                sched(),
            ).unwrap();
            let v = Tensor::vector(v);
            let c = Condition::none();
            let a = m.score_jvp(&Tensor::vector(z1), t, &c, &v).unwrap();
            let b = m.score_jvp(&Tensor::vector(z2), t, &c, &v).unwrap();
            prop_assert!(max_abs_diff(&a, &b).unwrap() < 1e-12);
            let s = m.marginal_variance(0, t);
            let want = v.zip_map(&s, "x", |x, y| -x / y).unwrap();
            prop_assert!(max_abs_diff(&a, &want).unwrap() < 1e-12);
        }

        #[test]
        fn one_component_mixture_is_the_gaussian(
            z in proptest::collection::vec(-3.0f64..3.0, 3), t in 0usize..=50,
        ) {
            let mu = Tensor::vector(vec![0.1, 0.2, 0.3]);
            let var = Tensor::vector(vec![1.5, 0.5, 2.0]);
            let g = GaussianMixtureScore::gaussian(mu.clone(), var.clone(), sched()).unwrap();
            let z = Tensor::vector(z);
            let s = g.score(&z, t, &Condition::none()).unwrap();
            let ab = sched().alpha_bar(t);
            let want: Vec<f64> = (0..3).map(|i| {
                let sv = ab * var.data()[i] + 1.0 - ab;
                -(z.data()[i] - ab.sqrt() * mu.data()[i]) / sv
            }).collect();
            prop_assert!(max_abs_diff(&s, &Tensor::vector(want)).unwrap() < 1e-14);
        }
    }
}
