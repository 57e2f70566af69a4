use super::params::ParamSet;
use crate::error::Result;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: ParamSet<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ParamSet<T> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: ParamSet<T>) -> Result<()> {
        self.velocity.check_congruent(&v)?;
        self.velocity = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: T) -> Result<()> {
        params.check_congruent(grads)?;
        params.check_congruent(&self.velocity)?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(self.velocity.values_mut())
        {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
        Ok(())
    }
}
