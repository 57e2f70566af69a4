use ndarray::{Array1, Array2, Array4};

use super::Differentiable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine classifier on flattened images, `logits = W·vec(x) + b`.
///
/// Used where attack behaviour must be checked against closed forms.
#[derive(Clone, Debug)]
pub struct LinearModel<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape("bias length must equal number of classes".into()));
        }
        Ok(Self { weight, bias })
    }

    fn flatten(&self, x: &Array4<T>) -> Result<Array2<T>> {
        let (b, c, h, w) = x.dim();
        if c * h * w != self.weight.ncols() {
            return Err(Error::Shape(format!(
                "linear model expects {} input features, got {}",
                self.weight.ncols(),
                c * h * w
            )));
        }
        Ok(x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, c * h * w))
            .expect("contiguous"))
    }
}

impl<T: Scalar> Differentiable<T> for LinearModel<T> {
    type Tape = (usize, usize, usize, usize);

    fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    fn logits(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.flatten(x)?.dot(&self.weight.t()) + &self.bias)
    }

    fn forward_taped(&self, x: &Array4<T>) -> Result<(Array2<T>, Self::Tape)> {
        Ok((self.logits(x)?, x.dim()))
    }

    fn input_vjp(&self, dim: &Self::Tape, grad_logits: &Array2<T>) -> Result<Array4<T>> {
        Ok(grad_logits
            .dot(&self.weight)
            .into_shape_with_order(*dim)
            .expect("input shape"))
    }
}
