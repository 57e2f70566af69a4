//! Perturbation generators: the PGD family with pluggable objectives,
//! single-step attacks, norm-ball projection and a gradient-free random
//! search.
//!
//! Every attack treats the model as frozen and differentiates it in
//! inference mode. Returned perturbations satisfy the norm bound and, when
//! pixel clamping is on, keep `x + δ` inside `[0, 1]`.

mod discriminator;
mod square;

use ndarray::{concatenate, s, Array2, Array4, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use discriminator::{train_oi_discriminator, DiscriminatorConfig, DiscriminatorReport};
pub use square::{square_attack, SquareConfig};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::loss::{bce_with_logits, cross_entropy, kl_to_target, softmax};
use crate::nn::{Differentiable, Network, Want};
use crate::perceptual::{LpipsContext, LpipsReference};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatModel {
    pub norm: Norm,
    pub eps: f64,
}

impl ThreatModel {
    pub fn new(norm: Norm, eps: f64) -> Result<Self> {
        let t = Self { norm, eps };
        t.validate()?;
        Ok(t)
    }

    pub fn linf(eps: f64) -> Result<Self> {
        Self::new(Norm::Linf, eps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::InvalidArgument(format!("threat radius must lie in (0, 1], got {}", self.eps)));
        }
        Ok(())
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.norm, eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    Ce,
    /// `KL(f(x) ‖ f(x+δ))` with the clean prediction held fixed.
    Kl,
    /// `CE − λ·LPIPS(x, x+δ)`.
    CeMinusLpips,
    /// `CE − λ·BCE(D(x, δ), oracle-invariant)`.
    CeMinusDisc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Zero,
    /// Elementwise `U(−radius, radius)`.
    Uniform { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub threat: ThreatModel,
    pub steps: usize,
    pub step_size: f64,
    pub loss: AttackLoss,
    pub lambda: f64,
    pub init: Init,
    #[serde(default = "default_true")]
    pub clamp_pixel_range: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl AttackSpec {
    /// Cross-entropy PGD from zero with step size `2ε/steps`.
    pub fn pgd(threat: ThreatModel, steps: usize) -> Self {
        Self {
            threat,
            steps,
            step_size: 2.0 * threat.eps / steps.max(1) as f64,
            loss: AttackLoss::Ce,
            lambda: 0.0,
            init: Init::Zero,
            clamp_pixel_range: true,
            seed: 0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.threat.validate() {
            v.push(e.to_string());
        }
        if !(self.step_size > 0.0) {
            v.push(format!("attack step_size must be positive, got {}", self.step_size));
        }
        if !(self.lambda >= 0.0) {
            v.push(format!("attack lambda must be nonnegative, got {}", self.lambda));
        }
        if let Init::Uniform { radius } = self.init {
            if !(radius >= 0.0 && radius <= self.threat.eps) {
                v.push(format!("uniform init radius {radius} must lie in [0, eps = {}]", self.threat.eps));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(v.join("; ")))
        }
    }
}

/// Extra models needed by the regularised objectives.
#[derive(Clone, Copy)]
pub enum Aux<'a, T: Scalar> {
    None,
    Lpips(&'a LpipsContext<T>),
    Discriminator(&'a Network<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T> {
    pub delta: Array4<T>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn zeros_like(x: &Array4<T>) -> Self {
        Self {
            delta: Array4::zeros(x.dim()),
        }
    }

    /// Per-sample norm of the requested family.
    pub fn norms(&self, norm: Norm) -> Vec<T> {
        self.delta
            .axis_iter(Axis(0))
            .map(|d| match norm {
                Norm::Linf => d.iter().fold(T::zero(), |m, v| m.max(v.abs())),
                Norm::L2 => d.iter().map(|v| *v * *v).sum::<T>().sqrt(),
            })
            .collect()
    }

    /// Checks the norm bound (ℓ2 with a relative slack of `1e-6`) and, when
    /// `clamp` is set, that `x + δ ∈ [0, 1]`.
    pub fn check(&self, x: &Array4<T>, threat: &ThreatModel, clamp: bool) -> Result<()> {
        if self.delta.dim() != x.dim() {
            return Err(Error::Shape("perturbation and images differ in shape".into()));
        }
        let eps = match threat.norm {
            Norm::Linf => T::lit(threat.eps),
            Norm::L2 => T::lit(threat.eps * (1.0 + 1e-6)),
        };
        if let Some((i, n)) = self.norms(threat.norm).into_iter().enumerate().find(|(_, n)| *n > eps) {
            return Err(Error::Numeric(format!("sample {i} has norm {n} above eps {}", threat.eps)));
        }
        if clamp {
            let ok = Zip::from(x)
                .and(&self.delta)
                .all(|&xv, &d| xv + d >= T::zero() && xv + d <= T::one());
            if !ok {
                return Err(Error::Numeric("perturbed pixels leave [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(a: &Array4<T>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn project_inplace<T: Scalar>(delta: &mut Array4<T>, threat: &ThreatModel) {
    let eps = T::lit(threat.eps);
    match threat.norm {
        Norm::Linf => delta.mapv_inplace(|v| v.max(-eps).min(eps)),
        Norm::L2 => {
            for mut d in delta.axis_iter_mut(Axis(0)) {
                let n = d.iter().map(|v| *v * *v).sum::<T>().sqrt();
                if n > eps {
                    let scale = eps / n;
                    d.mapv_inplace(|v| v * scale);
                }
            }
        }
    }
}

/// Projection onto the threat ball: elementwise clip for ℓ∞, per-sample
/// rescaling for ℓ2.
pub fn project<T: Scalar>(delta: &Perturbation<T>, threat: &ThreatModel) -> Result<Perturbation<T>> {
    check_finite(&delta.delta, "perturbation")?;
    let mut d = delta.delta.clone();
    project_inplace(&mut d, threat);
    Ok(Perturbation { delta: d })
}

/// `δ ← clamp(δ, −x, 1 − x)`
fn clamp_to_pixels<T: Scalar>(delta: &mut Array4<T>, x: &Array4<T>) {
    Zip::from(delta).and(x).for_each(|d, &xv| {
        *d = d.max(-xv).min(T::one() - xv);
    });
}

fn constrain<T: Scalar>(delta: &mut Array4<T>, x: &Array4<T>, threat: &ThreatModel, clamp: bool) {
    project_inplace(delta, threat);
    if clamp {
        clamp_to_pixels(delta, x);
    }
}

/// Unit ascent direction: sign for ℓ∞, per-sample normalised gradient for ℓ2.
fn direction<T: Scalar>(grad: &Array4<T>, norm: Norm) -> Array4<T> {
    match norm {
        Norm::Linf => grad.mapv(T::sign_or_zero),
        Norm::L2 => {
            let mut out = grad.clone();
            for mut g in out.axis_iter_mut(Axis(0)) {
                let n = g.iter().map(|v| *v * *v).sum::<T>().sqrt();
                if n > T::zero() {
                    g.mapv_inplace(|v| v / n);
                }
            }
            out
        }
    }
}

fn uniform_noise<T: Scalar>(dim: (usize, usize, usize, usize), radius: f64, r: &mut rng::Rng) -> Array4<T> {
    if radius <= 0.0 {
        return Array4::zeros(dim);
    }
    Array4::from_shape_simple_fn(dim, || T::lit(r.random_range(-radius..=radius)))
}

/// Fixed inputs of an attack objective.
struct Objective<'a, T: Scalar> {
    loss: AttackLoss,
    lambda: T,
    labels: &'a [usize],
    /// Clean prediction, for the KL objective.
    target: Option<Array2<T>>,
    lpips_ref: Option<LpipsReference<T>>,
    aux: Aux<'a, T>,
}

impl<'a, T: Scalar> Objective<'a, T> {
    fn new<M: Differentiable<T>>(
        model: &M,
        x: &Array4<T>,
        labels: &'a [usize],
        loss: AttackLoss,
        lambda: f64,
        aux: Aux<'a, T>,
    ) -> Result<Self> {
        match (loss, &aux) {
            (AttackLoss::CeMinusLpips, Aux::Lpips(_)) | (AttackLoss::CeMinusDisc, Aux::Discriminator(_)) => {}
            (AttackLoss::CeMinusLpips, _) => {
                return Err(Error::InvalidArgument("ce_minus_lpips requires an LPIPS context".into()))
            }
            (AttackLoss::CeMinusDisc, _) => {
                return Err(Error::InvalidArgument("ce_minus_disc requires a discriminator".into()))
            }
            _ => {}
        }
        let target = (loss == AttackLoss::Kl)
            .then(|| model.logits(x).map(|l| softmax(&l)))
            .transpose()?;
        let lpips_ref = match (loss, aux) {
            (AttackLoss::CeMinusLpips, Aux::Lpips(ctx)) => Some(ctx.reference(x)?),
            _ => None,
        };
        Ok(Self {
            loss,
            lambda: T::lit(lambda),
            labels,
            target,
            lpips_ref,
            aux,
        })
    }

    /// Per-sample objective values and the gradient of their sum with
    /// respect to `δ`.
    fn eval<M: Differentiable<T>>(&self, model: &M, x: &Array4<T>, delta: &Array4<T>) -> Result<(Vec<T>, Array4<T>)> {
        let adv = x + delta;
        let (logits, tape) = model.forward_taped(&adv)?;
        let main = match &self.target {
            Some(t) => kl_to_target(&logits, t)?,
            None => cross_entropy(&logits, self.labels, T::zero())?,
        };
        let mut values = main.per_sample;
        let mut grad = model.input_vjp(&tape, &main.grad)?;
        match (self.loss, self.aux) {
            (AttackLoss::CeMinusLpips, Aux::Lpips(ctx)) => {
                let reference = self.lpips_ref.as_ref().expect("reference built with the objective");
                let (dist, g) = ctx.distance_to_reference(reference, &adv, true)?;
                let g = g.expect("gradient requested");
                for (v, d) in values.iter_mut().zip(&dist) {
                    *v -= self.lambda * *d;
                }
                grad.scaled_add(-self.lambda, &g);
            }
            (AttackLoss::CeMinusDisc, Aux::Discriminator(disc)) => {
                let c = x.dim().1;
                let input = concatenate(Axis(1), &[x.view(), delta.view()]).expect("matching shapes");
                let tape = disc.forward(&input, crate::nn::Mode::Eval)?;
                let oi = vec![T::zero(); x.dim().0];
                let bce = bce_with_logits(&tape.logits, &oi)?;
                let g = disc
                    .backward(&tape, Some(&bce.grad), &[], Want::INPUT)?
                    .input
                    .expect("input gradient requested");
                for (v, b) in values.iter_mut().zip(&bce.per_sample) {
                    *v -= self.lambda * *b;
                }
                grad.scaled_add(-self.lambda, &g.slice(s![.., c.., .., ..]));
            }
            _ => {}
        }
        Ok((values, grad))
    }
}

/// Per-sample value of an attack objective at `x + δ` and the gradient of
/// the summed objective with respect to `δ`.
pub fn attack_objective<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    delta: &Array4<T>,
    loss: AttackLoss,
    lambda: f64,
    aux: Aux<'_, T>,
) -> Result<(Vec<T>, Array4<T>)> {
    let obj = Objective::new(model, &batch.pixels, &batch.labels, loss, lambda, aux)?;
    obj.eval(model, &batch.pixels, delta)
}

fn initial_delta<T: Scalar>(x: &Array4<T>, spec: &AttackSpec) -> Array4<T> {
    let mut delta = match spec.init {
        Init::Zero => Array4::zeros(x.dim()),
        Init::Uniform { radius } => {
            let mut r = rng::stream(spec.seed, rng::ATTACK, &[]);
            uniform_noise(x.dim(), radius, &mut r)
        }
    };
    constrain(&mut delta, x, &spec.threat, spec.clamp_pixel_range);
    delta
}

/// Projected gradient ascent on the chosen objective.
pub fn pgd<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    spec: &AttackSpec,
    aux: Aux<'_, T>,
) -> Result<Perturbation<T>> {
    spec.validate()?;
    let x = &batch.pixels;
    let obj = Objective::new(model, x, &batch.labels, spec.loss, spec.lambda, aux)?;
    let mut delta = initial_delta(x, spec);
    let step = T::lit(spec.step_size);
    for k in 0..spec.steps {
        let (values, grad) = obj.eval(model, x, &delta)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("attack objective is not finite at step {k}")));
        }
        delta.scaled_add(step, &direction(&grad, spec.threat.norm));
        constrain(&mut delta, x, &spec.threat, spec.clamp_pixel_range);
    }
    Ok(Perturbation { delta })
}

fn ce_input_grad<T: Scalar, M: Differentiable<T>>(model: &M, x: &Array4<T>, labels: &[usize]) -> Result<Array4<T>> {
    let (logits, tape) = model.forward_taped(x)?;
    let ce = cross_entropy(&logits, labels, T::zero())?;
    if ce.per_sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attack objective is not finite at step 0".into()));
    }
    model.input_vjp(&tape, &ce.grad)
}

/// Single step of size `ε` along the gradient direction from the clean image.
pub fn fgsm<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    threat: &ThreatModel,
) -> Result<Perturbation<T>> {
    threat.validate()?;
    let g = ce_input_grad(model, &batch.pixels, &batch.labels)?;
    let mut delta = direction(&g, threat.norm) * T::lit(threat.eps);
    constrain(&mut delta, &batch.pixels, threat, true);
    Ok(Perturbation { delta })
}

/// Uniform start in `[−r, r]`, then one step of size `ε − r`, projected.
pub fn rfgsm<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    threat: &ThreatModel,
    noise_r: f64,
    seed: u64,
) -> Result<Perturbation<T>> {
    threat.validate()?;
    if !(noise_r >= 0.0 && (noise_r < threat.eps || noise_r == 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "R-FGSM noise radius {noise_r} must lie in [0, eps = {})",
            threat.eps
        )));
    }
    let x = &batch.pixels;
    let mut r = rng::stream(seed, rng::ATTACK, &[]);
    let mut delta = uniform_noise(x.dim(), noise_r, &mut r);
    clamp_to_pixels(&mut delta, x);
    let g = ce_input_grad(model, &(x + &delta), &batch.labels)?;
    delta.scaled_add(T::lit(threat.eps - noise_r), &direction(&g, threat.norm));
    constrain(&mut delta, x, threat, true);
    Ok(Perturbation { delta })
}

/// Attack at the reference radius, then project onto the training radius.
/// Returns `(δ̂, δ̃)`.
pub fn os_attack<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    eps_ref: f64,
    eps_tilde: f64,
    spec: &AttackSpec,
    aux: Aux<'_, T>,
) -> Result<(Perturbation<T>, Perturbation<T>)> {
    if eps_ref < eps_tilde {
        return Err(Error::InvalidArgument(format!("eps_ref {eps_ref} < eps_tilde {eps_tilde}")));
    }
    let at_ref = AttackSpec {
        threat: spec.threat.with_eps(eps_ref)?,
        ..*spec
    };
    let hat = pgd(model, batch, &at_ref, aux)?;
    let tilde = project(&hat, &spec.threat.with_eps(eps_tilde)?)?;
    Ok((hat, tilde))
}

#[cfg(test)]
mod tests;
