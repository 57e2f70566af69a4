//! Classification objectives. Every function returns per-sample values and
//! the gradient of their *sum* with respect to the logits; callers divide by
//! the batch size when they want a batch mean.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct LossGrad<T> {
    pub per_sample: Vec<T>,
    pub grad: Array2<T>,
}

impl<T: Scalar> LossGrad<T> {
    pub fn mean(&self) -> T {
        let n = T::lit(self.per_sample.len().max(1) as f64);
        self.per_sample.iter().copied().sum::<T>() / n
    }
}

pub fn log_softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    log_softmax(logits).mapv(T::exp)
}

fn check_labels(n_classes: usize, labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), rows)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Cross-entropy against one-hot targets mixed with `smoothing` uniform mass.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize], smoothing: T) -> Result<LossGrad<T>> {
    let (b, k) = logits.dim();
    check_labels(k, labels, b)?;
    let logp = log_softmax(logits);
    let off = smoothing / T::lit(k as f64);
    let on = T::one() - smoothing + off;
    let mut per_sample = Vec::with_capacity(b);
    let mut grad = logp.mapv(T::exp);
    for (i, &y) in labels.iter().enumerate() {
        let mut l = T::zero();
        for j in 0..k {
            let t = if j == y { on } else { off };
            if t > T::zero() {
                l -= t * logp[[i, j]];
            }
            grad[[i, j]] -= t;
        }
        per_sample.push(l);
    }
    Ok(LossGrad { per_sample, grad })
}

/// `KL(target ‖ softmax(logits))` per sample, with `target` held constant.
pub fn kl_to_target<T: Scalar>(logits: &Array2<T>, target: &Array2<T>) -> Result<LossGrad<T>> {
    if logits.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let logp = log_softmax(logits);
    let per_sample = logp
        .outer_iter()
        .zip(target.outer_iter())
        .map(|(lp, t)| {
            lp.iter()
                .zip(t.iter())
                .filter(|(_, &t)| t > T::zero())
                .map(|(&lp, &t)| t * (t.ln() - lp))
                .sum::<T>()
                // rounding can leave an exact zero slightly negative
                .max(T::zero())
        })
        .collect();
    let mut grad = logp.mapv(T::exp);
    for (mut g, t) in grad.outer_iter_mut().zip(target.outer_iter()) {
        let mass = t.sum();
        for (g, &t) in g.iter_mut().zip(t.iter()) {
            *g = *g * mass - t;
        }
    }
    Ok(LossGrad { per_sample, grad })
}

/// Discrete `KL(p ‖ q)` for two probability vectors.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > T::zero())
        .map(|(&p, &q)| p * (p.ln() - q.ln()))
        .sum()
}

/// Binary cross-entropy on column 0 of `logits` against `targets` in {0,1}.
pub fn bce_with_logits<T: Scalar>(logits: &Array2<T>, targets: &[T]) -> Result<LossGrad<T>> {
    let (b, _) = logits.dim();
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for {b} rows", targets.len())));
    }
    let mut grad = Array2::zeros(logits.dim());
    let per_sample = (0..b)
        .map(|i| {
            let z = logits[[i, 0]];
            let t = targets[i];
            // softplus(z) - t z, stable for both signs of z
            let sp = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            let sig = T::one() / (T::one() + (-z).exp());
            grad[[i, 0]] = sig - t;
            sp - t * z
        })
        .collect();
    Ok(LossGrad { per_sample, grad })
}

pub fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kl_is_zero_on_identical_distributions() {
        let logits = array![[0.3f64, -1.2, 2.0], [0.0, 0.0, 0.0]];
        let target = softmax(&logits);
        let kl = kl_to_target(&logits, &target).unwrap();
        for v in kl.per_sample {
            assert!(v.abs() < 1e-12);
        }
        assert!(kl.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = array![[0.3f64, -1.2, 2.0], [1.0, 0.5, -0.5]];
        let labels = [2, 0];
        let lg = cross_entropy(&logits, &labels, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fp: f64 = cross_entropy(&p, &labels, 0.1).unwrap().per_sample.iter().sum();
                let fm: f64 = cross_entropy(&m, &labels, 0.1).unwrap().per_sample.iter().sum();
                assert!(((fp - fm) / (2.0 * h) - lg.grad[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        let logits = array![[2.0f64], [-3.0]];
        let lg = bce_with_logits(&logits, &[1.0, 0.0]).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((lg.per_sample[0] + s(2.0).ln()).abs() < 1e-12);
        assert!((lg.per_sample[1] + (1.0 - s(-3.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = array![[0.0f32, 1.0]];
        assert!(cross_entropy(&logits, &[2], 0.0).is_err());
    }
}
