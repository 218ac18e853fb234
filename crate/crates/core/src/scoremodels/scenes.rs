//! Procedural grayscale scene templates: a vertical road-like brightness ramp
//! plus one Gaussian blob whose position depends on the class.

use rand::Rng;
use rand_distr::StandardNormal;

use super::GaussianMixtureScore;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const DEFAULT_SIDE: usize = 16;
pub const TEMPLATE_VARIANCE: f64 = 0.01;

/// Blob centres as fractions of (height, width).
const BLOB_CENTRES: [(f64, f64); NUM_CLASSES] = [(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7)];

/// `[1, h, w]` template for `class`, values in `[0, 1]`.
pub fn template(class: usize, h: usize, w: usize) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(Error::invalid(format!("class {class} out of range 0..{NUM_CLASSES}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("scene {h}x{w} is too small")));
    }
    let (cy, cx) = BLOB_CENTRES[class];
    let (cy, cx) = (cy * (h - 1) as f64, cx * (w - 1) as f64);
    let spread = (h.min(w) as f64 / 8.0).max(0.5);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let ramp = 0.2 + 0.5 * i as f64 / (h - 1) as f64;
        for j in 0..w {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            data.push(ramp + 0.3 * (-d2 / (2.0 * spread * spread)).exp());
        }
    }
    Tensor::new(&[1, h, w], data)
}

/// Equal-weight mixture over all class templates with isotropic variance.
pub fn template_mixture(h: usize, w: usize, variance: f64, schedule: NoiseSchedule) -> Result<GaussianMixtureScore> {
    let means = (0..NUM_CLASSES)
        .map(|k| template(k, h, w))
        .collect::<Result<Vec<_>>>()?;
    GaussianMixtureScore::equal_weights(means, variance, schedule)
}

/// Template plus `noise`-scaled Gaussian jitter, clipped to `[0, 1]`.
pub fn render_scene<R: Rng + ?Sized>(class: usize, h: usize, w: usize, noise: f64, rng: &mut R) -> Result<Tensor> {
    let mut t = template(class, h, w)?;
    for v in t.data_mut() {
        *v = (*v + noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct_and_in_range() {
        let ts: Vec<Tensor> = (0..NUM_CLASSES).map(|k| template(k, 16, 16).unwrap()).collect();
        for t in &ts {
            assert!(t.min() >= 0.0 && t.max() <= 1.0);
        }
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                assert!(ts[a].sub(&ts[b]).unwrap().norm() > 0.5);
            }
        }
        assert!(template(NUM_CLASSES, 16, 16).is_err());
    }

    #[test]
    fn template_matches_closed_form() {
        let t = template(0, 16, 16).unwrap();
        // Bottom row, column 8: ramp 0.7, blob centred at (4.5, 4.5) with spread 2.
        let d2 = 10.5f64.powi(2) + 3.5f64.powi(2);
        let want = 0.7 + 0.3 * (-d2 / 8.0).exp();
        assert!((t.data()[15 * 16 + 8] - want).abs() < 1e-12);
    }
}
