//! Minimal reverse-mode machinery for the desk-scale classifier.

mod linear;
pub mod loss;
mod network;
mod ops;
mod optim;
mod params;

use ndarray::{Array2, Array4};

pub use linear::LinearModel;
pub use network::{Gradients, Mode, Network, NetworkConfig, Tape, Want};
pub use ops::ConvGeom;
pub use optim::Sgd;
pub use params::ParamSet;

use crate::error::Result;
use crate::scalar::Scalar;

/// A classifier whose logits can be differentiated with respect to its
/// input. Attacks are written against this trait; parameters are frozen.
pub trait Differentiable<T: Scalar> {
    type Tape;

    fn n_classes(&self) -> usize;

    fn logits(&self, x: &Array4<T>) -> Result<Array2<T>>;

    fn forward_taped(&self, x: &Array4<T>) -> Result<(Array2<T>, Self::Tape)>;

    /// Gradient of `Σ grad_logits ⊙ logits` with respect to the input.
    fn input_vjp(&self, tape: &Self::Tape, grad_logits: &Array2<T>) -> Result<Array4<T>>;
}

/// Networks are differentiated in inference mode: normalisation layers use
/// their running statistics, so the objective is a per-sample function.
impl<T: Scalar> Differentiable<T> for Network<T> {
    type Tape = Tape<T>;

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn logits(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.predict(x)
    }

    fn forward_taped(&self, x: &Array4<T>) -> Result<(Array2<T>, Self::Tape)> {
        let tape = self.forward(x, Mode::Eval)?;
        Ok((tape.logits.clone(), tape))
    }

    fn input_vjp(&self, tape: &Self::Tape, grad_logits: &Array2<T>) -> Result<Array4<T>> {
        Ok(self
            .backward(tape, Some(grad_logits), &[], Want::INPUT)?
            .input
            .expect("input gradient requested"))
    }
}

#[cfg(test)]
mod tests;
