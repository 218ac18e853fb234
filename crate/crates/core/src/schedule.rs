//! Diffusion noise schedules and the forward noising process.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `β_t` linearly spaced between `params.0` and `params.1`.
    LinearBeta,
    /// Squared-cosine `ᾱ` curve; `params = (offset, max_beta)`.
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearBeta => "linear_beta",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::parse("schedule kind", format!("unknown kind `{other}`"))),
        }
    }
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.2;
pub const DEFAULT_COSINE_PARAMS: (f64, f64) = (0.008, 0.999);

/// Per-step `α_t`, `ᾱ_t`, `σ_t` for `t = 1..=T`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    id: String,
    eta: f64,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, eta: f64, params: (f64, f64)) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let alpha: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => {
                let (start, end) = params;
                if !(start > 0.0 && start <= end && end < 1.0) {
                    return Err(Error::invalid(format!(
                        "linear_beta needs 0 < start <= end < 1, got ({start}, {end})"
                    )));
                }
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 {
                            0.0
                        } else {
                            i as f64 / (steps - 1) as f64
                        };
                        1.0 - (start + (end - start) * frac)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let (offset, max_beta) = params;
                if !(offset > 0.0 && max_beta > 0.0 && max_beta < 1.0) {
                    return Err(Error::invalid(format!(
                        "cosine needs offset > 0 and 0 < max_beta < 1, got ({offset}, {max_beta})"
                    )));
                }
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| 1.0 - (1.0 - f(t) / f(t - 1)).clamp(0.0, max_beta))
                    .collect()
            }
        };
        let id = format!(
            "{kind}:T={steps}:eta={}:params={},{}",
            fmt_f64(eta),
            fmt_f64(params.0),
            fmt_f64(params.1)
        );
        Self::from_alpha(id, alpha, eta)
    }

    pub fn linear_beta(steps: usize, start: f64, end: f64, eta: f64) -> Result<Self> {
        Self::build(ScheduleKind::LinearBeta, steps, eta, (start, end))
    }

    /// Linear-β, `T = 50`, `β ∈ [1e-4, 0.2]`, deterministic.
    pub fn desk_default() -> Self {
        Self::linear_beta(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, 0.0)
            .expect("default schedule is valid")
    }

    /// Builds a schedule from explicit per-step `α_t`; `ᾱ` and `σ` are derived.
    pub fn from_alpha(id: String, alpha: Vec<f64>, eta: f64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a < 1.0))
        {
            return Err(Error::invalid(format!("alpha_{} = {a} outside (0, 1)", i + 1)));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        let sigma = (0..alpha.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                eta * ((1.0 - prev) / (1.0 - alpha_bar[i])).sqrt() * (1.0 - alpha[i]).sqrt()
            })
            .collect::<Vec<f64>>();
        let sched = Self {
            id,
            eta,
            alpha,
            alpha_bar,
            sigma,
        };
        for t in 1..=sched.steps() {
            if sched.sigma(t).powi(2) > 1.0 - sched.alpha_bar(t - 1) {
                return Err(Error::invalid(format!("sigma_{t}^2 exceeds 1 - alpha_bar_{}", t - 1)));
            }
        }
        Ok(sched)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// Like [`check_step`](Self::check_step) but also admits `t = 0`.
    pub fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `α_t` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T` (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Plain-text table, one `t alpha alpha_bar sigma` row per step.
    pub fn to_table(&self) -> String {
        let mut out = format!("# schedule {}\n# t alpha alpha_bar sigma\n", self.id);
        for t in 1..=self.steps() {
            out.push_str(&format!(
                "{t} {} {} {}\n",
                fmt_f64(self.alpha(t)),
                fmt_f64(self.alpha_bar(t)),
                fmt_f64(self.sigma(t))
            ));
        }
        out
    }

    /// Restores a schedule written by [`to_table`](Self::to_table). `ᾱ` is
    /// recomputed from `α`, and `σ` is taken from the table.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut id = String::from("table");
        let mut alpha = Vec::new();
        let mut sigma = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# schedule ") {
                id = rest.trim().to_string();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: String| Error::parse(format!("schedule table line {}", lineno + 1), m);
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 columns, got {}", fields.len())));
            }
            let t: usize = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            if t != alpha.len() + 1 {
                return Err(bad(format!("expected step {}, got {t}", alpha.len() + 1)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{e}")));
            alpha.push(num(fields[1])?);
            sigma.push(num(fields[3])?);
        }
        let mut sched = Self::from_alpha(id, alpha, 0.0)?;
        for (t, s) in sigma.iter().enumerate() {
            if !(*s >= 0.0) || s.powi(2) > 1.0 - sched.alpha_bar(t) {
                return Err(Error::invalid(format!("sigma_{} = {s} is out of range", t + 1)));
            }
        }
        sched.sigma = sigma;
        Ok(sched)
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε` for `1 ≤ t ≤ T`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    noise_to_level(z0, t, eps, sched)
}

/// Same as [`forward_noise`] but `t = 0` returns `z0` itself.
pub(crate) fn noise_to_level(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_level(t)?;
    z0.same_shape(eps, "forward_noise")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, "forward_noise", |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear_beta(1, 0.1, 0.1, 0.0).unwrap();
        assert_eq!(s.alphas(), &[0.9]);
        assert_eq!(s.alpha_bars(), &[0.9]);
        assert_eq!(s.sigmas(), &[0.0]);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::linear_beta(2, 0.1, 0.2, 0.0).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_alpha_bar_matches_product_loop() {
        let s = NoiseSchedule::desk_default();
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 1e-4 + (0.2 - 1e-4) * i as f64 / 49.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(50) - prod).abs() < 1e-14);
        assert!(s.sigmas().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear_beta(0, 0.1, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.3, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.0, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.1, 1.0, 0.0).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.1, 0.2, 1.5).is_err());
    }

    #[test]
    fn cosine_schedule_satisfies_invariants() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 50, 1.0, DEFAULT_COSINE_PARAMS).unwrap();
        for t in 1..=50 {
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-14);
            assert!(s.sigma(t).powi(2) <= 1.0 - s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn eta_one_variance_bound() {
        let s = NoiseSchedule::linear_beta(50, 1e-4, 0.2, 1.0).unwrap();
        for t in 1..=50 {
            assert!(s.sigma(t).powi(2) <= 1.0 - s.alpha_bar(t - 1) + 1e-15);
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn table_round_trip() {
        let s = NoiseSchedule::linear_beta(7, 0.01, 0.3, 0.5).unwrap();
        let back = NoiseSchedule::from_table(&s.to_table()).unwrap();
        assert_eq!(back.alphas(), s.alphas());
        assert_eq!(back.alpha_bars(), s.alpha_bars());
        assert_eq!(back.sigmas(), s.sigmas());
        assert_eq!(back.id(), s.id());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::from_alpha("q".into(), vec![0.25], 0.0).unwrap();
        let z = forward_noise(&Tensor::vector(vec![2.0]), 1, &Tensor::zeros(&[1]), &s).unwrap();
        assert_eq!(z.data(), &[1.0]);
        let s = NoiseSchedule::from_alpha("q".into(), vec![0.75], 0.0).unwrap();
        let z = forward_noise(&Tensor::zeros(&[2]), 1, &Tensor::basis(&[2], 0), &s).unwrap();
        assert_eq!(z.data(), &[0.5, 0.0]);
        assert!(forward_noise(&Tensor::zeros(&[2]), 0, &Tensor::zeros(&[2]), &s).is_err());
        assert!(forward_noise(&Tensor::zeros(&[2]), 2, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn forward_noise_moments() {
        let s = NoiseSchedule::desk_default();
        let t = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::randn(&[3], &mut rng);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sumsq = [0.0; 3];
        for _ in 0..n {
            let eps = Tensor::randn(&[3], &mut rng);
            let z = forward_noise(&z0, t, &eps, &s).unwrap();
            for i in 0..3 {
                sum[i] += z.data()[i];
                sumsq[i] += z.data()[i].powi(2);
            }
        }
        let ab = s.alpha_bar(t);
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / n as f64).sqrt();
            assert!((mean - ab.sqrt() * z0.data()[i]).abs() < 3.0 * se_mean);
            assert!((var - want_var).abs() < 3.0 * se_var);
        }
    }

    proptest! {
        #[test]
        fn forward_noise_is_affine(
            a in proptest::collection::vec(-3.0f64..3.0, 8),
            b in proptest::collection::vec(-3.0f64..3.0, 8),
            c in -2.0f64..2.0, t in 1usize..=50,
        ) {
            let s = NoiseSchedule::desk_default();
            let z1 = Tensor::vector(a[..4].to_vec());
            let e1 = Tensor::vector(a[4..].to_vec());
            let z2 = Tensor::vector(b[..4].to_vec());
            let e2 = Tensor::vector(b[4..].to_vec());
            let lhs = forward_noise(&z1.axpy(c, &z2).unwrap(), t, &e1.axpy(c, &e2).unwrap(), &s).unwrap();
            let rhs = forward_noise(&z1, t, &e1, &s).unwrap()
                .axpy(c, &forward_noise(&z2, t, &e2, &s).unwrap()).unwrap();
            prop_assert!(crate::tensor::max_abs_diff(&lhs, &rhs).unwrap() < 1e-12);
        }

        #[test]
        fn schedule_invariants(steps in 1usize..200, start in 1e-5f64..0.1, width in 0.0f64..0.5, eta in 0.0f64..=1.0) {
            let s = NoiseSchedule::linear_beta(steps, start, start + width, eta).unwrap();
            for t in 1..=steps {
                prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-14);
                prop_assert!(s.sigma(t).powi(2) <= 1.0 - s.alpha_bar(t - 1));
            }
        }
    }
}
