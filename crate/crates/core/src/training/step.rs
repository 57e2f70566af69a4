use ndarray::{Array2, Array4, Zip};

use super::{Branch, LossBreakdown, LpipsModel, ModelState, TrainingOptions, Variant};
use crate::attacks::{os_attack, pgd, AttackLoss, AttackSpec, Aux, Init, ThreatModel};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, kl_to_target, softmax};
use crate::nn::{Mode, Network, ParamSet, Tape, Want};
use crate::perceptual::LpipsContext;
use crate::schedules::{Phase, ScheduleState, TrainConfig};
use crate::scalar::Scalar;

/// `α·clean + (1−α)·reference`, row by row.
pub fn convex_target<T: Scalar>(clean: &Array2<T>, reference: &Array2<T>, alpha: T) -> Array2<T> {
    clean * alpha + &(reference * (T::one() - alpha))
}

/// Loss value, parameter gradient of the batch mean, and the training-mode
/// tapes whose normalisation statistics should be absorbed.
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub grads: ParamSet<T>,
    pub tapes: Vec<Tape<T>>,
}

fn pixel_clamp<T: Scalar>(x: Array4<T>) -> Array4<T> {
    x.mapv(|v| v.max(T::zero()).min(T::one()))
}

fn mean<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / v.len() as f64
}

fn add_grads<T: Scalar>(acc: &mut Option<ParamSet<T>>, g: ParamSet<T>) -> Result<()> {
    match acc {
        Some(a) => a.add_scaled(&g, T::one()),
        None => {
            *acc = Some(g);
            Ok(())
        }
    }
}

/// `CE(f(x), y) + β·KL(target ‖ f(x + δ̃))` with a detached target: the
/// clean prediction, or for the OS branch its convex combination with the
/// prediction at `x + δ̂`.
pub fn training_loss<T: Scalar>(
    net: &Network<T>,
    batch: &ImageBatch<T>,
    delta_tilde: &Array4<T>,
    reference: Option<(&Array4<T>, f64)>,
    beta: f64,
    label_smoothing: f64,
    branch: Branch,
) -> Result<LossOutput<T>> {
    let x = &batch.pixels;
    let n = T::lit(x.dim().0 as f64);
    let clean = net.forward(x, Mode::Train)?;
    let ce = cross_entropy(&clean.logits, &batch.labels, T::lit(label_smoothing))?;
    let clean_probs = softmax(&clean.logits);
    let target = match reference {
        Some((delta_hat, alpha)) => {
            let r = net.forward(&(x + delta_hat), Mode::Train)?;
            convex_target(&clean_probs, &softmax(&r.logits), T::lit(alpha))
        }
        None => clean_probs,
    };
    let adv = net.forward(&(x + delta_tilde), Mode::Train)?;
    let kl = kl_to_target(&adv.logits, &target)?;
    let mut grads = None;
    let gce = ce.grad.mapv(|g| g / n);
    add_grads(&mut grads, net.backward(&clean, Some(&gce), &[], Want::PARAMS)?.params.expect("params"))?;
    let b = T::lit(beta);
    let gkl = kl.grad.mapv(|g| b * g / n);
    add_grads(&mut grads, net.backward(&adv, Some(&gkl), &[], Want::PARAMS)?.params.expect("params"))?;
    let (ce_clean, l_adv) = (mean(&ce.per_sample), mean(&kl.per_sample));
    Ok(LossOutput {
        breakdown: LossBreakdown {
            ce_clean,
            l_adv,
            beta,
            total: ce_clean + beta * l_adv,
            branch,
        },
        grads: grads.expect("two passes"),
        tapes: vec![clean, adv],
    })
}

/// Cross-entropy on the adversarial input only.
fn pgd_at_loss<T: Scalar>(net: &Network<T>, batch: &ImageBatch<T>, delta: &Array4<T>, smoothing: f64) -> Result<LossOutput<T>> {
    let n = T::lit(batch.len() as f64);
    let tape = net.forward(&(&batch.pixels + delta), Mode::Train)?;
    let ce = cross_entropy(&tape.logits, &batch.labels, T::lit(smoothing))?;
    let g = ce.grad.mapv(|v| v / n);
    let grads = net.backward(&tape, Some(&g), &[], Want::PARAMS)?.params.expect("params");
    let ce_clean = mean(&ce.per_sample);
    Ok(LossOutput {
        breakdown: LossBreakdown {
            ce_clean,
            l_adv: 0.0,
            beta: 0.0,
            total: ce_clean,
            branch: Branch::Standard,
        },
        grads,
        tapes: vec![tape],
    })
}

/// Objective maximised by the weight perturbation.
pub enum AwpObjective<'a, T> {
    /// Cross-entropy on a fixed input.
    Ce { input: &'a Array4<T>, labels: &'a [usize] },
    /// The TRADES loss at `(x, x + δ)`.
    Trades {
        batch: &'a ImageBatch<T>,
        delta: &'a Array4<T>,
        beta: f64,
    },
}

/// Value (batch mean) and parameter gradient of an AWP objective, with
/// normalisation in training mode and running statistics left untouched.
pub fn awp_loss<T: Scalar>(net: &Network<T>, objective: &AwpObjective<'_, T>) -> Result<(f64, ParamSet<T>)> {
    match objective {
        AwpObjective::Ce { input, labels } => {
            let n = T::lit(labels.len() as f64);
            let tape = net.forward(input, Mode::Train)?;
            let ce = cross_entropy(&tape.logits, labels, T::zero())?;
            let g = ce.grad.mapv(|v| v / n);
            let grads = net.backward(&tape, Some(&g), &[], Want::PARAMS)?.params.expect("params");
            Ok((mean(&ce.per_sample), grads))
        }
        AwpObjective::Trades { batch, delta, beta } => {
            let out = training_loss(net, batch, delta, None, *beta, 0.0, Branch::Standard)?;
            Ok((out.breakdown.total, out.grads))
        }
    }
}

/// Layerwise-relative ascent step `v_l = γ·‖θ_l‖·g_l/‖g_l‖` on every
/// weight tensor of rank ≥ 2; other tensors, and layers where either norm
/// vanishes, get no perturbation.
pub fn weight_perturbation<T: Scalar>(net: &Network<T>, grads: &ParamSet<T>, gamma: f64) -> ParamSet<T> {
    let params = net.params();
    let mut v = params.zeros_like();
    if gamma == 0.0 {
        return v;
    }
    for i in net.weight_indices() {
        let (pn, gn) = (params.l2_norm(i), grads.l2_norm(i));
        if pn == T::zero() || gn == T::zero() {
            continue;
        }
        let scale = T::lit(gamma) * pn / gn;
        Zip::from(v.get_mut(i)).and(grads.get(i)).for_each(|v, &g| *v = scale * g);
    }
    v
}

/// Weight perturbation for the oracle-aligned trainer: one ascent step on
/// the cross-entropy of `clip(x + k·δ̃, 0, 1)` with `k = 2` (or 1).
pub fn awp_step<T: Scalar>(
    net: &Network<T>,
    batch: &ImageBatch<T>,
    delta_tilde: &Array4<T>,
    gamma: f64,
    double_delta: bool,
) -> Result<ParamSet<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("AWP radius must be nonnegative, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(net.params().zeros_like());
    }
    let k = T::lit(if double_delta { 2.0 } else { 1.0 });
    let input = pixel_clamp(&batch.pixels + &(delta_tilde * k));
    let (_, grads) = awp_loss(
        net,
        &AwpObjective::Ce {
            input: &input,
            labels: &batch.labels,
        },
    )?;
    Ok(weight_perturbation(net, &grads, gamma))
}

/// Evaluates `compute` at `θ + v`, restores `θ`, then takes the optimiser
/// step and updates the weight average.
fn apply_update<T: Scalar>(
    state: &mut ModelState<T>,
    v: Option<ParamSet<T>>,
    lr: f64,
    opts: &TrainingOptions,
    batch_index: usize,
    compute: impl FnOnce(&Network<T>) -> Result<LossOutput<T>>,
) -> Result<LossBreakdown> {
    let saved = match v {
        Some(v) => {
            let saved = state.network.params().clone();
            state.network.params_mut().add_scaled(&v, T::one())?;
            Some(saved)
        }
        None => None,
    };
    let out = compute(&state.network)?;
    if let Some(p) = saved {
        *state.network.params_mut() = p;
    }
    let bd = out.breakdown;
    if !bd.total.is_finite() || !out.grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss in {} branch at batch {batch_index} (ce {}, l_adv {})",
            bd.branch.as_str(),
            bd.ce_clean,
            bd.l_adv
        )));
    }
    for tape in &out.tapes {
        state.network.absorb_batch_stats(tape);
    }
    let params = state.network.params_mut();
    state.optimizer.step(params, &out.grads, T::lit(lr))?;
    state.step += 1;
    if opts.ewa_per_step {
        state.ewa_update(opts.ewa_warmup)?;
    }
    Ok(bd)
}

/// One oracle-aligned update. The branch is standard before the
/// oracle-aligned phase, then alternates OS (even `batch_index`) and OI.
pub fn oaat_batch<T: Scalar>(
    state: &mut ModelState<T>,
    batch: &ImageBatch<T>,
    sched: &ScheduleState,
    config: &TrainConfig,
    opts: &TrainingOptions,
    batch_index: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let branch = match sched.phase {
        Phase::Standard => Branch::Standard,
        Phase::OracleAligned if batch_index % 2 == 0 => Branch::Os,
        Phase::OracleAligned => Branch::Oi,
    };
    let eps = sched.eps_tilde;
    let threat = ThreatModel::linf(eps)?;
    let base = AttackSpec {
        init: Init::Uniform {
            radius: eps.min(config.eps_max / 4.0),
        },
        loss: opts.attack_loss,
        seed,
        ..AttackSpec::pgd(threat, sched.n_attack_steps)
    };
    let (delta_tilde, delta_hat) = match branch {
        Branch::Standard => (pgd(&state.network, batch, &base, Aux::None)?.delta, None),
        Branch::Os => {
            let spec = AttackSpec {
                step_size: 2.0 * config.eps_ref / sched.n_attack_steps as f64,
                ..base
            };
            let (hat, tilde) = os_attack(&state.network, batch, config.eps_ref, eps, &spec, Aux::None)?;
            (tilde.delta, Some(hat.delta))
        }
        Branch::Oi => {
            let feature = match opts.lpips_model {
                LpipsModel::Ewa => state.shadow_network(),
                LpipsModel::Live => state.network.clone(),
            };
            let ctx = LpipsContext::all_stages(feature)?;
            let spec = AttackSpec {
                loss: AttackLoss::CeMinusLpips,
                lambda: sched.lambda,
                init: Init::Uniform { radius: eps },
                ..base
            };
            (pgd(&state.network, batch, &spec, Aux::Lpips(&ctx))?.delta, None)
        }
    };
    let v = (opts.use_awp && opts.awp_gamma > 0.0)
        .then(|| awp_step(&state.network, batch, &delta_tilde, opts.awp_gamma, opts.awp_double_delta))
        .transpose()?;
    let reference = delta_hat.as_ref().map(|h| (h, sched.alpha));
    apply_update(state, v, sched.lr, opts, batch_index, |net| {
        training_loss(net, batch, &delta_tilde, reference, sched.beta, opts.label_smoothing, branch)
    })
}

/// One update of a baseline trainer at fixed radius `eps`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_batch<T: Scalar>(
    state: &mut ModelState<T>,
    batch: &ImageBatch<T>,
    variant: Variant,
    eps: f64,
    steps: usize,
    lr: f64,
    opts: &TrainingOptions,
    batch_index: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let threat = ThreatModel::linf(eps)?;
    let base = AttackSpec {
        seed,
        ..AttackSpec::pgd(threat, steps)
    };
    match variant {
        Variant::PgdAt => {
            let spec = AttackSpec {
                init: Init::Uniform { radius: eps },
                ..base
            };
            let delta = pgd(&state.network, batch, &spec, Aux::None)?.delta;
            apply_update(state, None, lr, opts, batch_index, |net| {
                pgd_at_loss(net, batch, &delta, opts.label_smoothing)
            })
        }
        Variant::Trades | Variant::AwpTrades => {
            // a small random start breaks the zero gradient of KL at δ = 0;
            // with no ascent steps the perturbation stays at zero
            let init = if steps > 0 {
                Init::Uniform { radius: eps.min(1e-3) }
            } else {
                Init::Zero
            };
            let spec = AttackSpec {
                loss: AttackLoss::Kl,
                init,
                ..base
            };
            let delta = pgd(&state.network, batch, &spec, Aux::None)?.delta;
            let v = (variant == Variant::AwpTrades && opts.awp_gamma > 0.0)
                .then(|| -> Result<ParamSet<T>> {
                    let (_, g) = awp_loss(
                        &state.network,
                        &AwpObjective::Trades {
                            batch,
                            delta: &delta,
                            beta: opts.trades_beta,
                        },
                    )?;
                    Ok(weight_perturbation(&state.network, &g, opts.awp_gamma))
                })
                .transpose()?;
            apply_update(state, v, lr, opts, batch_index, |net| {
                training_loss(net, batch, &delta, None, opts.trades_beta, opts.label_smoothing, Branch::Standard)
            })
        }
        Variant::Oaat => Err(Error::InvalidArgument("oaat batches go through oaat_batch".into())),
    }
}

#[cfg(test)]
mod tests;
