//! Feature-space perceptual distance computed from a frozen classifier, and
//! exponential weight averaging of parameters.

use ndarray::{Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::{Mode, Network, ParamSet, Want};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-10;

/// Frozen feature extractor plus the residual stages whose outputs are
/// compared.
#[derive(Clone, Debug)]
pub struct LpipsContext<T> {
    feature_model: Network<T>,
    layer_ids: Vec<usize>,
}

/// Unit-normalised reference features of `x1`, one map per tapped layer.
pub struct LpipsReference<T> {
    dim: (usize, usize, usize, usize),
    features: Vec<Array4<T>>,
}

/// Divides every spatial position's channel vector by its ℓ2 norm.
/// Returns the normalised map and the per-position norms `[B, 1, H, W]`.
fn unit_normalize<T: Scalar>(f: &Array4<T>) -> (Array4<T>, Array4<T>) {
    let norms = f
        .mapv(|v| v * v)
        .sum_axis(Axis(1))
        .mapv(|v| v.sqrt())
        .insert_axis(Axis(1));
    let eps = T::lit(NORM_EPS);
    let n = f / &norms.mapv(|r| r + eps);
    (n, norms)
}

impl<T: Scalar> LpipsContext<T> {
    pub fn new(feature_model: Network<T>, layer_ids: Vec<usize>) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(Error::InvalidArgument("LPIPS needs at least one tapped layer".into()));
        }
        if let Some(&l) = layer_ids.iter().find(|&&l| l >= feature_model.n_stages()) {
            return Err(Error::InvalidArgument(format!(
                "tap {l} out of range for a {}-stage network",
                feature_model.n_stages()
            )));
        }
        Ok(Self {
            feature_model,
            layer_ids,
        })
    }

    /// Taps every residual stage.
    pub fn all_stages(feature_model: Network<T>) -> Result<Self> {
        let ids = (0..feature_model.n_stages()).collect();
        Self::new(feature_model, ids)
    }

    pub fn feature_model(&self) -> &Network<T> {
        &self.feature_model
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn reference(&self, x1: &Array4<T>) -> Result<LpipsReference<T>> {
        let tape = self.feature_model.forward(x1, Mode::Eval)?;
        Ok(LpipsReference {
            dim: x1.dim(),
            features: self
                .layer_ids
                .iter()
                .map(|&l| unit_normalize(tape.stage_output(l)).0)
                .collect(),
        })
    }

    /// Distances from the reference to `x2`, and optionally the gradient of
    /// their sum with respect to `x2`.
    pub fn distance_to_reference(
        &self,
        reference: &LpipsReference<T>,
        x2: &Array4<T>,
        want_grad: bool,
    ) -> Result<(Vec<T>, Option<Array4<T>>)> {
        if reference.dim != x2.dim() {
            return Err(Error::InvalidArgument(format!(
                "LPIPS inputs differ in shape: {:?} vs {:?}",
                reference.dim,
                x2.dim()
            )));
        }
        let tape = self.feature_model.forward(x2, Mode::Eval)?;
        let b = x2.dim().0;
        let mut dist = vec![T::zero(); b];
        let mut tap_grads = Vec::new();
        let eps = T::lit(NORM_EPS);
        for (&l, n1) in self.layer_ids.iter().zip(&reference.features) {
            let f2 = tape.stage_output(l);
            let (n2, r2) = unit_normalize(f2);
            let (_, c, h, w) = f2.dim();
            let size = T::lit((c * h * w) as f64);
            let diff = &n2 - n1;
            for (d, s) in dist.iter_mut().zip(diff.axis_iter(Axis(0))) {
                *d += s.iter().map(|v| *v * *v).sum::<T>() / size;
            }
            if want_grad {
                // gradient of the layer term with respect to n2, then through
                // n = f / (r + ε) with r = ‖f‖ over channels
                let gn = diff.mapv(|v| T::lit(2.0) * v / size);
                let dot = (&gn * f2).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut gf = &gn / &r2.mapv(|r| r + eps);
                Zip::from(&mut gf)
                    .and_broadcast(f2)
                    .and_broadcast(&dot)
                    .and_broadcast(&r2)
                    .for_each(|g, &f, &dt, &r| {
                        if r > T::zero() {
                            *g -= f * dt / (r * (r + eps) * (r + eps));
                        }
                    });
                tap_grads.push((l, gf));
            }
        }
        let grad = if want_grad {
            let taps: Vec<(usize, &Array4<T>)> = tap_grads.iter().map(|(l, g)| (*l, g)).collect();
            Some(
                self.feature_model
                    .backward(&tape, None, &taps, Want::INPUT)?
                    .input
                    .expect("input gradient requested"),
            )
        } else {
            None
        };
        Ok((dist, grad))
    }

    pub fn distance(&self, x1: &Array4<T>, x2: &Array4<T>) -> Result<Vec<T>> {
        if x1.dim() != x2.dim() {
            return Err(Error::InvalidArgument(format!(
                "LPIPS inputs differ in shape: {:?} vs {:?}",
                x1.dim(),
                x2.dim()
            )));
        }
        let r = self.reference(x1)?;
        Ok(self.distance_to_reference(&r, x2, false)?.0)
    }

    /// Distances and the gradient of their sum with respect to `x2`.
    pub fn distance_with_grad(&self, x1: &Array4<T>, x2: &Array4<T>) -> Result<(Vec<T>, Array4<T>)> {
        if x1.dim() != x2.dim() {
            return Err(Error::InvalidArgument(format!(
                "LPIPS inputs differ in shape: {:?} vs {:?}",
                x1.dim(),
                x2.dim()
            )));
        }
        let r = self.reference(x1)?;
        let (d, g) = self.distance_to_reference(&r, x2, true)?;
        Ok((d, g.expect("gradient requested")))
    }
}

pub fn lpips_distance<T: Scalar>(ctx: &LpipsContext<T>, x1: &Array4<T>, x2: &Array4<T>) -> Result<Vec<T>> {
    ctx.distance(x1, x2)
}

/// Geometric moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EwaState<T> {
    pub shadow_params: ParamSet<T>,
    pub tau: f64,
}

impl<T: Scalar> EwaState<T> {
    pub fn new(initial: &ParamSet<T>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(Self {
            shadow_params: initial.clone(),
            tau,
        })
    }

    /// `shadow ← τ·shadow + (1−τ)·live`
    pub fn update(&mut self, live: &ParamSet<T>) -> Result<()> {
        self.update_with_tau(live, self.tau)
    }

    /// One update with a one-off decay in place of `self.tau`.
    pub fn update_with_tau(&mut self, live: &ParamSet<T>, tau: f64) -> Result<()> {
        self.shadow_params
            .check_congruent(live)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let tau = T::lit(tau);
        let rest = T::one() - tau;
        for (s, l) in self.shadow_params.values_mut().iter_mut().zip(live.values()) {
            Zip::from(s).and(l).for_each(|s, &l| *s = tau * *s + rest * l);
        }
        Ok(())
    }
}

pub fn ewa_update<T: Scalar>(state: &EwaState<T>, live: &ParamSet<T>) -> Result<EwaState<T>> {
    let mut next = state.clone();
    next.update(live)?;
    Ok(next)
}
