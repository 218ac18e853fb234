use super::{check_input, Condition, ScoreModel};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `s(z) = A·z + b` on flattened `z`, independent of `t` and `c`.
#[derive(Clone, Debug)]
pub struct LinearScore {
    shape: Vec<usize>,
    a: Tensor,
    a_t: Tensor,
    b: Tensor,
    schedule: NoiseSchedule,
}

impl LinearScore {
    pub fn new(shape: &[usize], a: Tensor, b: Option<Tensor>, schedule: NoiseSchedule) -> Result<Self> {
        let n: usize = shape.iter().product();
        if a.shape() != [n, n] {
            return Err(Error::shape("linear score matrix", &[n, n], a.shape()));
        }
        let b = b.unwrap_or_else(|| Tensor::zeros(shape));
        if b.shape() != shape {
            return Err(Error::shape("linear score offset", shape, b.shape()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            a_t: a.transpose()?,
            a,
            b,
            schedule,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }
}

impl ScoreModel for LinearScore {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, z: &Tensor, t: usize, _c: &Condition) -> Result<Tensor> {
        check_input(self, z, t, "linear score")?;
        self.a.matvec(z)?.into_shape(&self.shape)?.add(&self.b)
    }

    fn score_jvp(&self, z: &Tensor, t: usize, _c: &Condition, v: &Tensor) -> Result<Tensor> {
        check_input(self, z, t, "linear score")?;
        z.same_shape(v, "score jvp")?;
        self.a.matvec(v)?.into_shape(&self.shape)
    }

    fn score_vjp(&self, z: &Tensor, t: usize, _c: &Condition, w: &Tensor) -> Result<Tensor> {
        check_input(self, z, t, "linear score")?;
        z.same_shape(w, "score vjp")?;
        self.a_t.matvec(w)?.into_shape(&self.shape)
    }

    fn describe(&self) -> String {
        format!("linear(shape={:?})", self.shape)
    }
}
