use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{pgd, AttackSpec, Aux};
use crate::data::{split_indices, ImageBatch, ImageSet};
use crate::error::{Error, Result};
use crate::nn::loss::bce_with_logits;
use crate::nn::{Differentiable, Mode, Network, NetworkConfig, Sgd, Want};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub widths: Vec<usize>,
    /// Images held out to measure accuracy.
    pub n_heldout: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 0.05,
            widths: vec![8, 16],
            n_heldout: 64,
            seed: 0,
        }
    }
}

pub struct DiscriminatorReport<T> {
    pub network: Network<T>,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Pairs `(x_i, δ_i)` labelled 1 followed by `(x_i, δ_{i+1 mod B})`
/// labelled 0, with channels concatenated.
fn pair_batch<T: Scalar>(x: &Array4<T>, delta: &Array4<T>) -> (Array4<T>, Vec<T>) {
    let b = x.dim().0;
    let order: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
    let shuffled = delta.select(Axis(0), &order);
    let matched = concatenate(Axis(1), &[x.view(), delta.view()]).expect("same shape");
    let mismatched = concatenate(Axis(1), &[x.view(), shuffled.view()]).expect("same shape");
    let input = concatenate(Axis(0), &[matched.view(), mismatched.view()]).expect("same shape");
    let mut labels = vec![T::one(); b];
    labels.extend(std::iter::repeat_n(T::zero(), b));
    (input, labels)
}

/// Trains a binary classifier that tells whether a perturbation belongs to
/// the image it is paired with. Perturbations come from `spec` against the
/// frozen `model`; matched pairs are the positive (oracle-sensitive) class
/// and perturbations shuffled across the batch are the negative class.
pub fn train_oi_discriminator<T: Scalar, M: Differentiable<T>>(
    model: &M,
    data: &ImageSet<T>,
    spec: &AttackSpec,
    cfg: &DiscriminatorConfig,
) -> Result<DiscriminatorReport<T>> {
    let (c, _, _) = data.image_dim();
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("discriminator batches need at least two images".into()));
    }
    let (train_idx, held_idx) = split_indices(&data.labels, data.n_classes, None, cfg.n_heldout, false, cfg.seed)?;
    if held_idx.len() < 2 || train_idx.len() < 2 {
        return Err(Error::InvalidArgument("too few images to train and evaluate a discriminator".into()));
    }
    let train = data.subset(&train_idx);
    let held = data.subset(&held_idx);
    let net_cfg = NetworkConfig::new(2 * c, 1, cfg.widths.clone());
    let mut disc = Network::<T>::new(net_cfg, cfg.seed)?;
    let mut opt = Sgd::new(disc.params(), T::lit(0.9), T::lit(5e-4));
    let mut final_loss = f64::NAN;
    let perturb = |batch: &ImageBatch<T>, salt: u64| {
        let s = AttackSpec {
            seed: spec.seed.wrapping_add(salt),
            ..*spec
        };
        pgd(model, batch, &s, Aux::None)
    };
    let mut salt = 0u64;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in train.batch_indices(cfg.batch_size, Some(cfg.seed ^ (epoch as u64 + 1))) {
            if idx.len() < 2 {
                continue;
            }
            let batch = train.batch(&idx)?;
            salt += 1;
            let delta = perturb(&batch, salt)?.delta;
            let (input, labels) = pair_batch(&batch.pixels, &delta);
            let tape = disc.forward(&input, Mode::Train)?;
            let loss = bce_with_logits(&tape.logits, &labels)?;
            let mean = loss.mean().to_f64_lossy();
            if !mean.is_finite() {
                return Err(Error::Numeric(format!("discriminator loss is not finite in epoch {}", epoch + 1)));
            }
            let n = T::lit(input.dim().0 as f64);
            let grad = loss.grad.mapv(|g| g / n);
            let grads = disc.backward(&tape, Some(&grad), &[], Want::PARAMS)?.params.expect("params");
            disc.absorb_batch_stats(&tape);
            opt.step(disc.params_mut(), &grads, T::lit(cfg.lr))?;
            total += mean;
            count += 1;
        }
        if count > 0 {
            final_loss = total / count as f64;
        }
        log::debug!("discriminator epoch {} loss {final_loss:.4}", epoch + 1);
    }
    let mut correct = 0usize;
    let mut seen = 0usize;
    for idx in held.batch_indices(cfg.batch_size, None) {
        if idx.len() < 2 {
            continue;
        }
        let batch = held.batch(&idx)?;
        salt += 1;
        let delta = perturb(&batch, salt)?.delta;
        let (input, labels) = pair_batch(&batch.pixels, &delta);
        let logits = disc.predict(&input)?;
        for (z, y) in logits.column(0).iter().zip(&labels) {
            if (*z > T::zero()) == (*y > T::zero()) {
                correct += 1;
            }
            seen += 1;
        }
    }
    let heldout_accuracy = correct as f64 / seen.max(1) as f64;
    if heldout_accuracy <= 0.5 {
        log::warn!("discriminator held-out accuracy {heldout_accuracy:.3} is not above chance");
    }
    Ok(DiscriminatorReport {
        network: disc,
        heldout_accuracy,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_balanced_and_channel_concatenated() {
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(b, ..)| b as f64 / 10.0);
        let d = Array4::from_shape_fn((3, 2, 4, 4), |(b, ..)| b as f64 / 100.0);
        let (input, labels) = pair_batch(&x, &d);
        assert_eq!(input.dim(), (6, 4, 4, 4));
        assert_eq!(labels.iter().filter(|&&l| l == 1.0).count(), 3);
        assert_eq!(labels.iter().filter(|&&l| l == 0.0).count(), 3);
        // negatives carry the next image's perturbation
        assert_eq!(input[[3, 2, 0, 0]], 0.01);
        assert_eq!(input[[5, 2, 0, 0]], 0.0);
        assert_eq!(input[[5, 0, 0, 0]], 0.2);
    }
}
